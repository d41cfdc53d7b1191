#pragma once

// Umbrella header for the excavation planning and simulation toolkit.

#include "aes/common.hpp"
#include "aes/geometry.hpp"
#include "aes/cloud_io.hpp"
#include "aes/terrain.hpp"
#include "aes/kinematics.hpp"
#include "aes/perception.hpp"
#include "aes/mlp.hpp"
#include "aes/selection.hpp"
#include "aes/motion.hpp"
#include "aes/task_planner.hpp"
#include "aes/scenario.hpp"
