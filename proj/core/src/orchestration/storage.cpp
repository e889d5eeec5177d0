#include "vbiopsy/orchestration/storage.hpp"

#include <fcntl.h>
#include <openssl/evp.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <ctime>
#include <fstream>
#include <sstream>

#include "vbiopsy/common/error.hpp"

namespace vbiopsy::orchestration {

namespace fs = std::filesystem;
using nlohmann::json;

std::string code_version() { return VBIOPSY_VERSION; }

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  void update(std::string_view s) { EVP_DigestUpdate(ctx_, s.data(), s.size()); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) out += {digits[md[i] >> 4], digits[md[i] & 15]};
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::NotFound, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex();
}

std::string file_sha256(const fs::path& path) { return sha256_hex(slurp(path)); }

std::string config_hash(const json& config) { return sha256_hex(config.dump()); }

std::string tree_sha256(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::NotFound, "no directory " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  Sha256 h;
  for (const auto& f : files) {
    h.update(f.generic_string());
    h.update(std::string_view("\0", 1));
    h.update(file_sha256(dir / f));
  }
  return h.hex();
}

json read_json(const fs::path& path) {
  const auto text = slurp(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::IntegrityMismatch, path.string() + " is not valid JSON: " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::Io, "cannot write " + tmp.string());
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

void write_stamp(const fs::path& dir, const std::string& kind, const json& config) {
  write_json(dir / "stamp.json",
             {{"kind", kind}, {"config_hash", config_hash(config)}, {"code_version", code_version()}, {"config", config}});
}

void verify_stamp(const fs::path& dir, const std::string& kind, const json& expected_config) {
  require(fs::exists(dir / "stamp.json"), ErrorCode::MissingPrerequisite,
          "no " + kind + " artifact at " + dir.string());
  const auto stamp = read_json(dir / "stamp.json");
  const auto stored = stamp.value("config_hash", std::string());
  require(stamp.value("kind", std::string()) == kind, ErrorCode::IntegrityMismatch,
          dir.string() + " holds a '" + stamp.value("kind", std::string()) + "' artifact, expected '" + kind + "'");
  require(stamp.contains("config") && config_hash(stamp["config"]) == stored, ErrorCode::IntegrityMismatch,
          dir.string() + ": stamp hash " + stored + " does not match its recorded config (tampered or corrupt)");
  const auto expected = config_hash(expected_config);
  require(stored == expected, ErrorCode::IntegrityMismatch,
          dir.string() + ": artifact built with config " + stored.substr(0, 12) + " (code " +
              stamp.value("code_version", std::string("?")) + ") but the current config hashes to " +
              expected.substr(0, 12) + "; retrain or point at the matching config");
}

Clock system_clock() {
  return [] {
    return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
  };
}

std::string iso8601(std::int64_t t) {
  const std::time_t tt = static_cast<std::time_t>(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json to_json(const RunRecord& r) {
  json j{{"command", r.command},     {"inputs", r.inputs},   {"config_hash", r.config_hash},
         {"outputs", r.outputs},     {"wall_seconds", r.wall_seconds}, {"started", r.started},
         {"status", r.status},       {"code_version", code_version()}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

fs::path new_run_dir(const fs::path& root, const std::string& command, const std::string& hash, std::int64_t now) {
  require_safe_id(command, "command");
  const std::tm tm = [&] {
    const std::time_t tt = static_cast<std::time_t>(now);
    std::tm t{};
    gmtime_r(&tt, &t);
    return t;
  }();
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
  const auto base = root / "runs" / command;
  fs::create_directories(base);
  const std::string stem = std::string(stamp) + "-" + hash.substr(0, std::min<std::size_t>(8, hash.size()));
  for (int n = 0;; ++n) {
    const auto dir = base / (n == 0 ? stem : stem + "-" + std::to_string(n));
    // create_directory is atomic: false means someone else owns that name
    if (fs::create_directory(dir)) return dir;
  }
}

fs::path write_run_record(const fs::path& root, const RunRecord& record, std::int64_t now) {
  const auto dir = new_run_dir(root, record.command, record.config_hash, now);
  write_json(dir / "run.json", to_json(record));
  return dir;
}

FileLock::FileLock(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  require(fd_ >= 0, ErrorCode::Io, "cannot open lock file " + path.string());
  if (::flock(fd_, LOCK_EX) != 0) {
    ::close(fd_);
    fail(ErrorCode::Io, "cannot lock " + path.string());
  }
}

FileLock::~FileLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

void require_safe_id(const std::string& id, const std::string& what) {
  const bool ok = !id.empty() && id.size() <= 128 && id.front() != '-' &&
                  std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'; });
  require(ok, ErrorCode::InvalidArgument, what + " '" + id + "' must be 1-128 characters of [A-Za-z0-9_-]");
}

}  // namespace vbiopsy::orchestration
