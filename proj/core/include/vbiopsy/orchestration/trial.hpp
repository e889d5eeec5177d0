#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "vbiopsy/common/error.hpp"
#include "vbiopsy/metrics/trial.hpp"
#include "vbiopsy/orchestration/storage.hpp"

namespace vbiopsy::orchestration {

/// Conflict raised for an out-of-order phase; carries the washout deadline
/// when waiting would make the request legal.
class PhaseOrderViolation : public Error {
 public:
  PhaseOrderViolation(const std::string& what, std::optional<std::int64_t> deadline)
      : Error(ErrorCode::Conflict, what), deadline_(deadline) {}
  std::optional<std::int64_t> deadline() const { return deadline_; }

 private:
  std::optional<std::int64_t> deadline_;
};

struct TrialDefinition {
  std::string trial_id;
  std::vector<std::string> cases;
  std::map<std::string, metrics::ExperienceBand> readers;
  std::map<std::string, int> truth;
  /// AI probability per case; thresholded for the AI-alone row.
  std::map<std::string, double> ai_probability;
  double threshold = 0.5;
  std::int64_t washout_seconds = 60 * 86400;
  double max_elapsed_seconds = 7200.0;
  std::int64_t created_at = 0;

  void validate() const;
  std::map<std::string, int> ai_labels() const;
  /// Per-reader presentation order: a seeded shuffle of the case list.
  std::vector<std::string> case_order(const std::string& reader) const;
};

nlohmann::json to_json(const TrialDefinition& d);
TrialDefinition trial_definition_from_json(const nlohmann::json& j);

std::string session_id(const std::string& trial, const std::string& reader, metrics::TrialPhase phase);

struct SessionTimes {
  std::int64_t opened_at = 0;
  std::optional<std::int64_t> finalized_at;
};

/// Pure phase machine: unaided -> washout -> ai_assisted per reader.
class TrialMachine {
 public:
  explicit TrialMachine(TrialDefinition def);

  const TrialDefinition& definition() const { return def_; }
  /// Opening an already open session returns its id again.
  std::string open_session(const std::string& reader, metrics::TrialPhase phase, std::int64_t now);
  void decide(const std::string& sid, const std::string& case_id, int decision, double elapsed_seconds);
  /// Requires every trial case to be decided; repeating it is a no-op.
  void finalize(const std::string& sid, std::int64_t now);

  const metrics::ReaderSession& session(const std::string& sid) const;
  const std::map<std::string, metrics::ReaderSession>& sessions() const { return sessions_; }
  std::optional<std::int64_t> washout_deadline(const std::string& reader) const;
  std::vector<metrics::ReaderSession> finalized_sessions() const;
  metrics::TrialReport report() const;

  nlohmann::json state_json() const;
  static TrialMachine from_json(TrialDefinition def, const nlohmann::json& state);

 private:
  metrics::ReaderSession& mutable_session(const std::string& sid);

  TrialDefinition def_;
  std::map<std::string, metrics::ReaderSession> sessions_;
  std::map<std::string, SessionTimes> times_;
};

/// Trial directories under <root>/trials/<id>: trial.json, state.json and a
/// lock file. Every mutation runs under the per-trial file lock plus a
/// process-local mutex, so concurrent service threads and CLI runs serialize.
class TrialStore {
 public:
  explicit TrialStore(std::filesystem::path root, Clock clock = system_clock());

  void create(TrialDefinition def);
  bool exists(const std::string& trial_id) const;
  TrialMachine load(const std::string& trial_id) const;

  /// Responses are cached per idempotency key; a retried key replays the
  /// stored response instead of re-applying the mutation.
  nlohmann::json open_session(const std::string& trial_id, const std::string& reader, const std::string& phase,
                              const std::optional<std::string>& idempotency_key = std::nullopt);
  nlohmann::json decide(const std::string& sid, const std::string& case_id, int decision, double elapsed_seconds,
                        const std::optional<std::string>& idempotency_key = std::nullopt);
  nlohmann::json finalize(const std::string& sid, const std::optional<std::string>& idempotency_key = std::nullopt);
  nlohmann::json report(const std::string& trial_id) const;

  static std::string trial_of(const std::string& sid);

 private:
  template <typename F>
  nlohmann::json mutate(const std::string& trial_id, const std::optional<std::string>& key, const std::string& op, F&& f);
  std::filesystem::path dir(const std::string& trial_id) const;
  std::mutex& mutex_for(const std::string& trial_id);

  std::filesystem::path root_;
  Clock clock_;
  std::mutex map_mutex_;
  std::map<std::string, std::unique_ptr<std::mutex>> mutexes_;
};

}  // namespace vbiopsy::orchestration
