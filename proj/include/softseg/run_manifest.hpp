#pragma once

// Provenance record written into every output directory: the command line,
// resolved configuration, seeds, and content hashes of inputs and outputs.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "softseg/core.hpp"
#include "softseg/hash.hpp"

namespace softseg {

inline constexpr const char* kToolkitVersion = "0.1.0";
inline constexpr const char* kRunManifestName = "run_manifest.json";

struct RunManifest {
  std::string command;                        // e.g. "fuse soft"
  std::vector<std::string> argv;              // arguments after the program name
  std::string working_directory;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::uint64_t> seeds;
  int threads = 0;
  std::map<std::string, std::string> inputs;   // absolute path -> fnv1a64 hex
  std::map<std::string, std::string> outputs;  // path relative to the output directory -> fnv1a64 hex
  std::string version = kToolkitVersion;

  void add_input(const std::filesystem::path& p) {
    inputs[std::filesystem::absolute(p).lexically_normal().string()] = hex64(hash_file(p));
  }

  /// Hashes every regular file under `dir` except the manifest itself.
  void collect_outputs(const std::filesystem::path& dir) {
    outputs.clear();
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      const auto rel = std::filesystem::relative(e.path(), dir).generic_string();
      if (rel == kRunManifestName) continue;
      outputs[rel] = hex64(hash_file(e.path()));
    }
  }

  nlohmann::json to_json() const {
    return {{"command", command}, {"argv", argv},       {"working_directory", working_directory},
            {"config", config},   {"seeds", seeds},     {"threads", threads},
            {"inputs", inputs},   {"outputs", outputs}, {"version", version}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    try {
      RunManifest m;
      m.command = j.at("command").get<std::string>();
      m.argv = j.at("argv").get<std::vector<std::string>>();
      m.working_directory = j.value("working_directory", std::string{});
      m.config = j.value("config", nlohmann::json::object());
      m.seeds = j.value("seeds", std::vector<std::uint64_t>{});
      m.threads = j.value("threads", 0);
      m.inputs = j.value("inputs", std::map<std::string, std::string>{});
      m.outputs = j.value("outputs", std::map<std::string, std::string>{});
      m.version = j.value("version", std::string{});
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("run manifest: ") + e.what());
    }
  }

  void save(const std::filesystem::path& dir) const {
    std::ofstream out(dir / kRunManifestName);
    if (!out) throw Error("cannot write run manifest in " + dir.string());
    out << to_json().dump(2) << '\n';
  }

  static RunManifest load(const std::filesystem::path& path) {
    const auto file = std::filesystem::is_directory(path) ? path / kRunManifestName : path;
    std::ifstream in(file);
    if (!in) throw Error("cannot open run manifest " + file.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error("run manifest " + file.string() + ": " + e.what());
    }
    return from_json(j);
  }
};

/// Structural comparison of two JSON documents; numbers agree within `tol`.
inline bool json_close(const nlohmann::json& a, const nlohmann::json& b, double tol) {
  if (a.is_number() && b.is_number()) {
    const double x = a.get<double>(), y = b.get<double>();
    return x == y || std::abs(x - y) <= tol;
  }
  if (a.type() != b.type()) return false;
  if (a.is_array()) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!json_close(a[i], b[i], tol)) return false;
    return true;
  }
  if (a.is_object()) {
    if (a.size() != b.size()) return false;
    for (auto it = a.begin(); it != a.end(); ++it)
      if (!b.contains(it.key()) || !json_close(it.value(), b.at(it.key()), tol)) return false;
    return true;
  }
  return a == b;
}

}  // namespace softseg
