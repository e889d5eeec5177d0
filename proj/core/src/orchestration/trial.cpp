#include "vbiopsy/orchestration/trial.hpp"

#include <algorithm>
#include <random>
#include <set>

namespace vbiopsy::orchestration {

namespace fs = std::filesystem;
using metrics::TrialPhase;
using nlohmann::json;

void TrialDefinition::validate() const {
  require_safe_id(trial_id, "trial id");
  require(!cases.empty(), ErrorCode::InvalidArgument, "a trial needs at least one case");
  require(!readers.empty(), ErrorCode::InvalidArgument, "a trial needs at least one reader");
  std::set<std::string> seen;
  for (const auto& c : cases) {
    require(seen.insert(c).second, ErrorCode::InvalidArgument, "duplicate trial case '" + c + "'");
    require(truth.count(c) == 1, ErrorCode::InvalidArgument, "no truth label for trial case '" + c + "'");
  }
  for (const auto& [r, band] : readers) require_safe_id(r, "reader id");
  require(washout_seconds >= 0, ErrorCode::InvalidArgument, "washout must be non-negative");
  require(max_elapsed_seconds > 0.0, ErrorCode::InvalidArgument, "max elapsed time must be positive");
}

std::map<std::string, int> TrialDefinition::ai_labels() const {
  std::map<std::string, int> out;
  for (const auto& [c, p] : ai_probability) out[c] = p >= threshold ? 1 : 0;
  return out;
}

std::vector<std::string> TrialDefinition::case_order(const std::string& reader) const {
  auto order = cases;
  const auto h = sha256_hex(trial_id + "/" + reader);
  std::mt19937_64 rng(std::stoull(h.substr(0, 15), nullptr, 16));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

json to_json(const TrialDefinition& d) {
  json readers = json::object();
  for (const auto& [r, b] : d.readers) readers[r] = std::string(metrics::to_string(b));
  return {{"trial_id", d.trial_id},
          {"cases", d.cases},
          {"readers", readers},
          {"truth", d.truth},
          {"ai_probability", d.ai_probability},
          {"threshold", d.threshold},
          {"washout_seconds", d.washout_seconds},
          {"max_elapsed_seconds", d.max_elapsed_seconds},
          {"created_at", d.created_at}};
}

TrialDefinition trial_definition_from_json(const json& j) {
  TrialDefinition d;
  d.trial_id = j.at("trial_id").get<std::string>();
  d.cases = j.at("cases").get<std::vector<std::string>>();
  for (const auto& [r, b] : j.at("readers").items()) d.readers[r] = metrics::experience_from_string(b.get<std::string>());
  d.truth = j.at("truth").get<std::map<std::string, int>>();
  d.ai_probability = j.value("ai_probability", std::map<std::string, double>{});
  d.threshold = j.value("threshold", 0.5);
  d.washout_seconds = j.value("washout_seconds", d.washout_seconds);
  d.max_elapsed_seconds = j.value("max_elapsed_seconds", d.max_elapsed_seconds);
  d.created_at = j.value("created_at", std::int64_t{0});
  d.validate();
  return d;
}

std::string session_id(const std::string& trial, const std::string& reader, TrialPhase phase) {
  return trial + "." + reader + "." + std::string(metrics::to_string(phase));
}

TrialMachine::TrialMachine(TrialDefinition def) : def_(std::move(def)) { def_.validate(); }

std::optional<std::int64_t> TrialMachine::washout_deadline(const std::string& reader) const {
  const auto it = times_.find(session_id(def_.trial_id, reader, TrialPhase::Unaided));
  if (it == times_.end() || !it->second.finalized_at) return std::nullopt;
  return *it->second.finalized_at + def_.washout_seconds;
}

std::string TrialMachine::open_session(const std::string& reader, TrialPhase phase, std::int64_t now) {
  const auto band = def_.readers.find(reader);
  require(band != def_.readers.end(), ErrorCode::NotFound, "reader '" + reader + "' is not enrolled in trial " + def_.trial_id);
  const auto sid = session_id(def_.trial_id, reader, phase);
  if (const auto it = sessions_.find(sid); it != sessions_.end()) {
    if (it->second.finalized) throw PhaseOrderViolation("session " + sid + " is already finalized", std::nullopt);
    return sid;
  }
  if (phase == TrialPhase::AiAssisted) {
    const auto deadline = washout_deadline(reader);
    if (!deadline) throw PhaseOrderViolation("reader '" + reader + "' must finalize the unaided phase first", std::nullopt);
    if (now < *deadline)
      throw PhaseOrderViolation("washout for reader '" + reader + "' ends at " + iso8601(*deadline), deadline);
  }
  metrics::ReaderSession s;
  s.session_id = sid;
  s.reader_id = reader;
  s.experience = band->second;
  s.phase = phase;
  sessions_[sid] = s;
  times_[sid] = SessionTimes{now, std::nullopt};
  return sid;
}

metrics::ReaderSession& TrialMachine::mutable_session(const std::string& sid) {
  const auto it = sessions_.find(sid);
  require(it != sessions_.end(), ErrorCode::NotFound, "unknown session '" + sid + "'");
  return it->second;
}

const metrics::ReaderSession& TrialMachine::session(const std::string& sid) const {
  const auto it = sessions_.find(sid);
  require(it != sessions_.end(), ErrorCode::NotFound, "unknown session '" + sid + "'");
  return it->second;
}

void TrialMachine::decide(const std::string& sid, const std::string& case_id, int decision, double elapsed_seconds) {
  auto& s = mutable_session(sid);
  require(!s.finalized, ErrorCode::Conflict, "session " + sid + " is finalized");
  require(def_.truth.count(case_id) == 1 && std::find(def_.cases.begin(), def_.cases.end(), case_id) != def_.cases.end(),
          ErrorCode::NotFound, "case '" + case_id + "' is not part of trial " + def_.trial_id);
  require(decision == 0 || decision == 1, ErrorCode::InvalidArgument, "decision must be 0 (low) or 1 (high)");
  require(std::isfinite(elapsed_seconds) && elapsed_seconds > 0.0 && elapsed_seconds < def_.max_elapsed_seconds,
          ErrorCode::InvalidArgument, "elapsed_seconds must lie in (0, " + std::to_string(def_.max_elapsed_seconds) + ")");
  for (const auto& e : s.entries)
    require(e.case_id != case_id, ErrorCode::Conflict, "case '" + case_id + "' already decided in " + sid);
  s.entries.push_back({case_id, decision, elapsed_seconds, s.phase == TrialPhase::AiAssisted});
}

void TrialMachine::finalize(const std::string& sid, std::int64_t now) {
  auto& s = mutable_session(sid);
  if (s.finalized) return;
  require(s.entries.size() == def_.cases.size(), ErrorCode::Conflict,
          sid + " has " + std::to_string(s.entries.size()) + " of " + std::to_string(def_.cases.size()) + " decisions");
  s.finalized = true;
  times_[sid].finalized_at = now;
}

std::vector<metrics::ReaderSession> TrialMachine::finalized_sessions() const {
  std::vector<metrics::ReaderSession> out;
  for (const auto& [sid, s] : sessions_)
    if (s.finalized) out.push_back(s);
  return out;
}

metrics::TrialReport TrialMachine::report() const {
  const auto done = finalized_sessions();
  require(!done.empty(), ErrorCode::MissingPrerequisite, "trial " + def_.trial_id + " has no finalized sessions");
  return metrics::trial_report(done, def_.truth, def_.ai_labels());
}

json TrialMachine::state_json() const {
  json sessions = json::array();
  for (const auto& [sid, s] : sessions_) {
    json j = metrics::to_json(s);
    const auto& t = times_.at(sid);
    j["opened_at"] = t.opened_at;
    j["finalized_at"] = t.finalized_at ? json(*t.finalized_at) : json(nullptr);
    sessions.push_back(j);
  }
  return {{"sessions", sessions}};
}

TrialMachine TrialMachine::from_json(TrialDefinition def, const json& state) {
  TrialMachine m(std::move(def));
  for (const auto& j : state.at("sessions")) {
    auto s = metrics::session_from_json(j);
    SessionTimes t{j.at("opened_at").get<std::int64_t>(), std::nullopt};
    if (!j.at("finalized_at").is_null()) t.finalized_at = j.at("finalized_at").get<std::int64_t>();
    m.times_[s.session_id] = t;
    m.sessions_[s.session_id] = std::move(s);
  }
  return m;
}

TrialStore::TrialStore(fs::path root, Clock clock) : root_(std::move(root)), clock_(std::move(clock)) {}

fs::path TrialStore::dir(const std::string& trial_id) const {
  require_safe_id(trial_id, "trial id");
  return root_ / "trials" / trial_id;
}

std::mutex& TrialStore::mutex_for(const std::string& trial_id) {
  std::lock_guard g(map_mutex_);
  auto& m = mutexes_[trial_id];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

bool TrialStore::exists(const std::string& trial_id) const { return fs::exists(dir(trial_id) / "trial.json"); }

void TrialStore::create(TrialDefinition def) {
  def.created_at = clock_();
  def.validate();
  const auto d = dir(def.trial_id);
  fs::create_directories(d);
  std::lock_guard g(mutex_for(def.trial_id));
  FileLock lock(d / "lock");
  require(!fs::exists(d / "trial.json"), ErrorCode::Conflict, "trial '" + def.trial_id + "' already exists");
  write_json(d / "state.json", {{"sessions", json::array()}, {"idempotency", json::object()}});
  write_json(d / "trial.json", to_json(def));
}

TrialMachine TrialStore::load(const std::string& trial_id) const {
  const auto d = dir(trial_id);
  require(fs::exists(d / "trial.json"), ErrorCode::NotFound, "unknown trial '" + trial_id + "'");
  return TrialMachine::from_json(trial_definition_from_json(read_json(d / "trial.json")), read_json(d / "state.json"));
}

std::string TrialStore::trial_of(const std::string& sid) {
  const auto dot = sid.find('.');
  require(dot != std::string::npos && dot > 0, ErrorCode::NotFound, "malformed session id '" + sid + "'");
  return sid.substr(0, dot);
}

template <typename F>
json TrialStore::mutate(const std::string& trial_id, const std::optional<std::string>& key, const std::string& op, F&& f) {
  const auto d = dir(trial_id);
  require(fs::exists(d / "trial.json"), ErrorCode::NotFound, "unknown trial '" + trial_id + "'");
  std::lock_guard g(mutex_for(trial_id));
  FileLock lock(d / "lock");
  auto state = read_json(d / "state.json");
  auto& cache = state["idempotency"];
  if (key) {
    require(!key->empty() && key->size() <= 200, ErrorCode::InvalidArgument, "bad idempotency key");
    if (cache.contains(*key)) {
      const auto& hit = cache.at(*key);
      require(hit.at("op") == op, ErrorCode::Conflict, "idempotency key reused for a different request");
      return hit.at("response");
    }
  }
  auto machine = TrialMachine::from_json(trial_definition_from_json(read_json(d / "trial.json")), state);
  json response = f(machine);
  json next = machine.state_json();
  next["idempotency"] = cache;
  if (key) next["idempotency"][*key] = {{"op", op}, {"response", response}};
  write_json(d / "state.json", next);
  return response;
}

json TrialStore::open_session(const std::string& trial_id, const std::string& reader, const std::string& phase,
                              const std::optional<std::string>& key) {
  const auto p = metrics::trial_phase_from_string(phase);
  return mutate(trial_id, key, "session:" + reader + ":" + phase, [&](TrialMachine& m) {
    const auto sid = m.open_session(reader, p, clock_());
    const auto& s = m.session(sid);
    json decided = json::array();
    for (const auto& e : s.entries) decided.push_back(e.case_id);
    return json{{"session_id", sid},
                {"phase", phase},
                {"reader", reader},
                {"cases", m.definition().case_order(reader)},
                {"decided", decided},
                {"show_ai", p == TrialPhase::AiAssisted}};
  });
}

json TrialStore::decide(const std::string& sid, const std::string& case_id, int decision, double elapsed,
                        const std::optional<std::string>& key) {
  return mutate(trial_of(sid), key, "decision:" + sid + ":" + case_id, [&](TrialMachine& m) {
    m.decide(sid, case_id, decision, elapsed);
    const auto& s = m.session(sid);
    return json{{"session_id", sid},
                {"case_id", case_id},
                {"recorded", s.entries.size()},
                {"remaining", m.definition().cases.size() - s.entries.size()}};
  });
}

json TrialStore::finalize(const std::string& sid, const std::optional<std::string>& key) {
  return mutate(trial_of(sid), key, "finalize:" + sid, [&](TrialMachine& m) {
    m.finalize(sid, clock_());
    json out{{"session_id", sid}, {"finalized", true}};
    const auto& s = m.session(sid);
    if (s.phase == TrialPhase::Unaided) {
      const auto deadline = m.washout_deadline(s.reader_id);
      out["washout_deadline"] = *deadline;
      out["washout_deadline_iso"] = iso8601(*deadline);
    }
    return out;
  });
}

json TrialStore::report(const std::string& trial_id) const { return metrics::to_json(load(trial_id).report()); }

}  // namespace vbiopsy::orchestration
