#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "aes/geometry.hpp"

// ASCII PLY and CSV serialization for point clouds, JSON for poses.

namespace aes::geometry {

using nlohmann::json;

inline void write_ply(const PointCloud& cloud, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("write_ply: cannot open " + path);
  f << "ply\nformat ascii 1.0\n";
  if (!cloud.frame_id.empty()) f << "comment frame " << cloud.frame_id << "\n";
  f << "element vertex " << cloud.size() << "\n"
    << "property float x\nproperty float y\nproperty float z\n"
    << "end_header\n";
  f.precision(9);
  for (const Vec3& p : cloud.points) {
    f << p.x() << " " << p.y() << " " << p.z() << "\n";
  }
}

inline PointCloud read_ply(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("read_ply: cannot open " + path);
  std::string line;
  std::size_t n_vertices = 0;
  bool header_done = false;
  PointCloud cloud;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "element") {
      std::string what;
      ss >> what >> n_vertices;
      if (what != "vertex") throw Error("read_ply: unsupported element " + what);
    } else if (tok == "comment") {
      std::string key;
      ss >> key;
      if (key == "frame") ss >> cloud.frame_id;
    } else if (tok == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt != "ascii") throw Error("read_ply: only ascii PLY supported");
    } else if (tok == "end_header") {
      header_done = true;
      break;
    }
  }
  if (!header_done) throw Error("read_ply: no end_header in " + path);
  cloud.points.reserve(n_vertices);
  for (std::size_t i = 0; i < n_vertices; ++i) {
    double x, y, z;
    if (!(f >> x >> y >> z)) throw Error("read_ply: truncated vertex list");
    cloud.points.emplace_back(x, y, z);
  }
  return cloud;
}

inline void write_cloud_csv(const PointCloud& cloud, const std::string& path,
                            bool header = true) {
  std::ofstream f(path);
  if (!f) throw Error("write_cloud_csv: cannot open " + path);
  f.precision(9);
  if (header) f << "x,y,z\n";
  for (const Vec3& p : cloud.points) {
    f << p.x() << "," << p.y() << "," << p.z() << "\n";
  }
}

inline PointCloud read_cloud_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("read_cloud_csv: cannot open " + path);
  PointCloud cloud;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    Vec3 p;
    bool ok = true;
    for (int i = 0; i < 3; ++i) {
      if (!std::getline(ss, cell, ',')) {
        ok = false;
        break;
      }
      try {
        p[i] = std::stod(cell);
      } catch (const std::exception&) {
        ok = false;
        break;
      }
    }
    if (!ok) {
      if (first) {  // optional header row
        first = false;
        continue;
      }
      throw Error("read_cloud_csv: malformed row '" + line + "'");
    }
    first = false;
    cloud.points.push_back(p);
  }
  return cloud;
}

inline json pose_to_json(const Pose3D& pose) {
  json j;
  j["rotation"] = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) j["rotation"].push_back(pose.rotation(r, c));
  j["translation"] = {pose.translation.x(), pose.translation.y(),
                      pose.translation.z()};
  return j;
}

inline Pose3D pose_from_json(const json& j) {
  if (!j.contains("rotation") || j["rotation"].size() != 9) {
    throw ConfigError("rotation", "expected 9 row-major floats");
  }
  if (!j.contains("translation") || j["translation"].size() != 3) {
    throw ConfigError("translation", "expected 3 floats");
  }
  Pose3D pose;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      pose.rotation(r, c) = j["rotation"][static_cast<std::size_t>(r * 3 + c)];
  for (int i = 0; i < 3; ++i)
    pose.translation[i] = j["translation"][static_cast<std::size_t>(i)];
  if (!pose.is_rigid(1e-6)) {
    throw ConfigError("rotation", "matrix is not orthonormal with det +1");
  }
  return pose;
}

}  // namespace aes::geometry
