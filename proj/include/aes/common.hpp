#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace aes {

// ---------------------------------------------------------------------------
// Error hierarchy. Every failure mode surfaced by the library derives from
// Error so callers can catch coarsely (the cycle engine converts planner
// failures into intervention events) or by specific type.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class EmptyInput : public Error {
public:
  explicit EmptyInput(const std::string& what) : Error(what) {}
};

class DegenerateGeometry : public Error {
public:
  explicit DegenerateGeometry(const std::string& what) : Error(what) {}
};

class OutOfBounds : public Error {
public:
  explicit OutOfBounds(const std::string& what) : Error(what) {}
};

class Unreachable : public Error {
public:
  explicit Unreachable(const std::string& what) : Error(what) {}
};

class LimitViolation : public Error {
public:
  LimitViolation(const std::string& what, std::vector<std::string> joints)
      : Error(what), offending_joints(std::move(joints)) {}
  std::vector<std::string> offending_joints;
};

class ShapeError : public Error {
public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

class NoValidTarget : public Error {
public:
  explicit NoValidTarget(const std::string& what) : Error(what) {}
};

class DivergenceError : public Error {
public:
  DivergenceError(const std::string& what, int epoch_)
      : Error(what), epoch(epoch_) {}
  int epoch = -1;
};

class DegenerateSamples : public Error {
public:
  explicit DegenerateSamples(const std::string& what) : Error(what) {}
};

class PoseRejected : public Error {
public:
  PoseRejected(const std::string& what, double fitness_)
      : Error(what), fitness(fitness_) {}
  double fitness = 0.0;
};

class ConfigError : public Error {
public:
  ConfigError(const std::string& field_path_, const std::string& what)
      : Error(field_path_ + ": " + what), field_path(field_path_) {}
  std::string field_path;
};

// ---------------------------------------------------------------------------
// Deterministic RNG plumbing. Every stochastic component takes an explicit
// 64-bit seed; sub-streams are derived with splitmix64 so that independent
// components never share a stream.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream));
}

inline Rng make_rng(std::uint64_t seed) { return Rng(splitmix64(seed)); }

// ---------------------------------------------------------------------------
// Angle helpers.
// ---------------------------------------------------------------------------

constexpr double kPi = 3.14159265358979323846;

inline double wrap_angle(double a) {
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a < 0) a += 2.0 * kPi;
  return a - kPi;
}

// Signed smallest difference a-b on the circle.
inline double angle_diff(double a, double b) { return wrap_angle(a - b); }

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

inline double sq(double x) { return x * x; }

}  // namespace aes
