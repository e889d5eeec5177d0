#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

namespace vbiopsy::orchestration {

std::string code_version();

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);
/// Hash of the canonical (key-sorted, compact) JSON dump.
std::string config_hash(const nlohmann::json& config);
/// Hash over relative paths and contents of every regular file, in path order.
std::string tree_sha256(const std::filesystem::path& dir);

nlohmann::json read_json(const std::filesystem::path& path);
/// Writes to a temporary sibling and renames, so readers never see a partial file.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

/// stamp.json: {kind, config_hash, code_version, config}
void write_stamp(const std::filesystem::path& dir, const std::string& kind, const nlohmann::json& config);
/// Refuses when the stamp is missing, self-inconsistent, or was written for a
/// different configuration than `expected_config`.
void verify_stamp(const std::filesystem::path& dir, const std::string& kind, const nlohmann::json& expected_config);

using Clock = std::function<std::int64_t()>;  // seconds since the epoch
Clock system_clock();
std::string iso8601(std::int64_t epoch_seconds);

struct RunRecord {
  std::string command;
  nlohmann::json inputs = nlohmann::json::object();
  std::string config_hash;
  nlohmann::json outputs = nlohmann::json::object();
  double wall_seconds = 0.0;
  std::string started;
  std::string status = "ok";
  std::string error;
};

nlohmann::json to_json(const RunRecord& r);

/// runs/<command>/<timestamp>-<hash8>[-n]; never reuses an existing directory.
std::filesystem::path new_run_dir(const std::filesystem::path& root, const std::string& command,
                                  const std::string& hash, std::int64_t now);
std::filesystem::path write_run_record(const std::filesystem::path& root, const RunRecord& record, std::int64_t now);

/// Exclusive advisory lock held for the object's lifetime.
class FileLock {
 public:
  explicit FileLock(const std::filesystem::path& path);
  ~FileLock();
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

/// Rejects ids that could escape a directory or collide with separators.
void require_safe_id(const std::string& id, const std::string& what);

}  // namespace vbiopsy::orchestration
