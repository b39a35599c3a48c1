#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "vitplast/serialize.hpp"

namespace vitplast::cli {

// Sidecar written next to every command's outputs. Everything except the
// two timestamps is a function of the command line and the input bytes.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;  // as given, without the program name
  Json config;                    // fully resolved options
  Json seeds;
  struct Input {
    std::string path;
    std::string sha256;
    std::uintmax_t bytes = 0;
  };
  std::vector<Input> inputs;
  std::vector<std::string> outputs;
  std::chrono::system_clock::time_point started;
  std::chrono::system_clock::time_point finished;

  void add_input(const std::filesystem::path& path);
};

inline constexpr const char* kManifestSchema = "vitplast.run/1";

std::string sha256_file(const std::filesystem::path& path);
std::string iso8601_utc(std::chrono::system_clock::time_point t);

Json to_json(const RunManifest& m);
RunManifest run_manifest_from_json(const Json& j);

void write_run_manifest(const std::filesystem::path& path, const RunManifest& m);
RunManifest read_run_manifest(const std::filesystem::path& path);

}  // namespace vitplast::cli
