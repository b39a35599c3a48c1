#include "run_manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <memory>

#include "vitplast/errors.hpp"
#include "vitplast/tensor_io.hpp"

namespace vitplast::cli {

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw Error("sha256: digest setup failed");
  }
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md;
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    char pair[3];
    std::snprintf(pair, sizeof pair, "%02x", md[i]);
    hex += pair;
  }
  return hex;
}

std::string iso8601_utc(std::chrono::system_clock::time_point t) {
  const std::time_t secs = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void RunManifest::add_input(const std::filesystem::path& path) {
  for (const Input& i : inputs) {
    if (i.path == path.string()) return;
  }
  inputs.push_back({path.string(), sha256_file(path), std::filesystem::file_size(path)});
}

Json to_json(const RunManifest& m) {
  Json inputs = Json::array();
  for (const auto& i : m.inputs) {
    inputs.push_back({{"path", i.path}, {"sha256", i.sha256}, {"bytes", i.bytes}});
  }
  return {{"schema", kManifestSchema},
          {"tool", "vitplast"},
          {"version", VITPLAST_VERSION},
          {"command", m.command},
          {"argv", m.argv},
          {"config", m.config},
          {"seeds", m.seeds},
          {"inputs", inputs},
          {"outputs", m.outputs},
          {"started_at", iso8601_utc(m.started)},
          {"finished_at", iso8601_utc(m.finished)}};
}

RunManifest run_manifest_from_json(const Json& j) {
  if (j.value("schema", "") != kManifestSchema) throw FormatError("not a run manifest");
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.argv = j.at("argv").get<std::vector<std::string>>();
  m.config = j.at("config");
  m.seeds = j.at("seeds");
  for (const Json& i : j.at("inputs")) {
    m.inputs.push_back({i.at("path").get<std::string>(), i.at("sha256").get<std::string>(),
                        i.at("bytes").get<std::uintmax_t>()});
  }
  m.outputs = j.at("outputs").get<std::vector<std::string>>();
  return m;
}

void write_run_manifest(const std::filesystem::path& path, const RunManifest& m) {
  write_file_atomic(path, dump_json(to_json(m)));
}

RunManifest read_run_manifest(const std::filesystem::path& path) {
  try {
    return run_manifest_from_json(Json::parse(read_file(path)));
  } catch (const Json::exception& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

}  // namespace vitplast::cli
