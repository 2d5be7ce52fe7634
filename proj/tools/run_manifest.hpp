#pragma once

// manifest.json bookkeeping for CLI runs: written with status "running"
// before any work starts, rewritten with outputs and status at the end.

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgnaa/error.hpp"

namespace pgnaa::cli {

inline constexpr const char* kToolVersion = "0.1.0";

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string() + " for digest");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw IoError("sha256 unavailable");
  }
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char h[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(h, sizeof h, "%02x", md[i]);
    hex += h;
  }
  return hex;
}

class RunManifest {
 public:
  RunManifest(std::filesystem::path out_dir, std::string command, std::uint64_t seed)
      : dir_(std::move(out_dir)) {
    j_ = {{"tool", "pgnaa"},
          {"version", kToolVersion},
          {"command", std::move(command)},
          {"seed", seed},
          {"inputs", nlohmann::json::array()},
          {"outputs", nlohmann::json::array()},
          {"status", "running"}};
  }

  // Records the digest of an input file as it is read.
  void add_input(const std::filesystem::path& path) {
    j_["inputs"].push_back({{"path", path.string()}, {"sha256", sha256_file(path)}});
  }

  void set_config(nlohmann::json config) { j_["config"] = std::move(config); }

  // Paths relative to the run directory.
  void add_output(const std::string& relative) { j_["outputs"].push_back(relative); }

  RunManifest(const RunManifest&) = delete;
  RunManifest& operator=(const RunManifest&) = delete;

  // A run abandoned by an exception is recorded as failed.
  ~RunManifest() {
    if (begun_ && !finished_) {
      try {
        j_["status"] = "failed";
        write();
      } catch (...) {
      }
    }
  }

  void begin() {
    begun_ = true;
    write();
  }

  void finish(const std::string& status = "complete") {
    j_["status"] = status;
    finished_ = true;
    write();
  }

  const nlohmann::json& json() const { return j_; }
  std::filesystem::path path() const { return dir_ / "manifest.json"; }

 private:
  void write() const {
    std::filesystem::create_directories(dir_);
    std::ofstream out(path(), std::ios::binary);
    if (!out) throw IoError("cannot write " + path().string());
    out << j_.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path().string());
  }

  std::filesystem::path dir_;
  nlohmann::json j_;
  bool begun_ = false;
  bool finished_ = false;
};

}  // namespace pgnaa::cli
