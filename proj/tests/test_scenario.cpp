#include <catch2/catch_amalgamated.hpp>

#include "aes/aes.hpp"

TEST_CASE("placeholder_scenario") { REQUIRE(true); }
