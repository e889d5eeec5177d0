#pragma once

// Reference model of the reader-trial phase rules, written from the protocol
// alone: unaided first, then a washout, then ai_assisted; every case decided
// once per session; finalize only when complete.

#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "vbiopsy/orchestration/trial.hpp"

namespace vbiopsy::oracle {

struct TrialEvent {
  enum Kind { Open, Decide, Finalize, Advance } kind;
  std::string reader;
  int phase = 0;  // 0 unaided, 1 ai_assisted
  std::string case_id;
  double elapsed = 1.0;
  std::int64_t dt = 0;
};

class TrialModel {
 public:
  TrialModel(std::vector<std::string> readers, std::vector<std::string> cases, std::int64_t washout, double max_elapsed)
      : cases_(std::move(cases)), washout_(washout), max_elapsed_(max_elapsed) {
    for (auto& r : readers) readers_.insert(r);
  }

  // Applies the event if legal and reports whether it was.
  bool apply(const TrialEvent& e) {
    if (e.kind == TrialEvent::Advance) {
      now_ += e.dt;
      return true;
    }
    if (!readers_.count(e.reader)) return false;
    auto& s = sessions_[{e.reader, e.phase}];
    switch (e.kind) {
      case TrialEvent::Open: {
        if (s.finalized) return false;
        if (s.open) return true;  // re-open is idempotent
        if (e.phase == 1) {
          const auto& u = sessions_[{e.reader, 0}];
          if (!u.finalized || now_ < u.finalized_at + washout_) return false;
        }
        s.open = true;
        return true;
      }
      case TrialEvent::Decide: {
        if (!s.open || s.finalized) return false;
        bool known = false;
        for (const auto& c : cases_) known = known || c == e.case_id;
        if (!known || s.decided.count(e.case_id)) return false;
        if (!(e.elapsed > 0.0 && e.elapsed < max_elapsed_)) return false;
        s.decided.insert(e.case_id);
        return true;
      }
      case TrialEvent::Finalize: {
        if (!s.open) return false;
        if (s.finalized) return true;
        if (s.decided.size() != cases_.size()) return false;
        s.finalized = true;
        s.finalized_at = now_;
        return true;
      }
      default: return false;
    }
  }

  std::int64_t now() const { return now_; }

 private:
  struct S {
    bool open = false, finalized = false;
    std::int64_t finalized_at = 0;
    std::set<std::string> decided;
  };
  std::set<std::string> readers_;
  std::vector<std::string> cases_;
  std::int64_t washout_;
  double max_elapsed_;
  std::int64_t now_ = 0;
  std::map<std::pair<std::string, int>, S> sessions_;
};

inline TrialEvent random_event(std::mt19937_64& rng, const std::vector<std::string>& readers,
                               const std::vector<std::string>& cases) {
  std::uniform_int_distribution<int> kind(0, 9);
  TrialEvent e;
  const int k = kind(rng);
  e.kind = k < 2 ? TrialEvent::Open : k < 7 ? TrialEvent::Decide : k < 8 ? TrialEvent::Finalize : TrialEvent::Advance;
  // an unknown reader now and then
  e.reader = rng() % 12 == 0 ? "ghost" : readers[rng() % readers.size()];
  e.phase = static_cast<int>(rng() % 2);
  e.case_id = rng() % 15 == 0 ? "not-a-case" : cases[rng() % cases.size()];
  const int t = static_cast<int>(rng() % 10);
  e.elapsed = t == 0 ? 0.0 : t == 1 ? -5.0 : t == 2 ? 7200.0 : 1.0 + static_cast<double>(rng() % 600);
  e.dt = static_cast<std::int64_t>(rng() % 40);
  return e;
}

struct SequenceStats {
  std::size_t events = 0;
  std::size_t illegal = 0;
  std::size_t mismatches = 0;
  std::size_t assisted_opened = 0;
};

// Runs one random sequence against the pure machine and the model.
inline SequenceStats run_trial_sequence(std::uint64_t seed, std::size_t length = 60) {
  std::mt19937_64 rng(seed);
  const std::vector<std::string> readers{"r1", "r2"};
  const std::vector<std::string> cases{"c1", "c2", "c3"};
  const std::int64_t washout = 30;
  orchestration::TrialDefinition def;
  def.trial_id = "t";
  def.cases = cases;
  for (const auto& r : readers) def.readers[r] = metrics::ExperienceBand::Under5;
  for (const auto& c : cases) def.truth[c] = 1;
  def.washout_seconds = washout;
  def.max_elapsed_seconds = 7200.0;
  orchestration::TrialMachine machine(def);
  TrialModel model(readers, cases, washout, 7200.0);
  SequenceStats st;
  for (std::size_t i = 0; i < length; ++i) {
    const auto e = random_event(rng, readers, cases);
    const bool legal = model.apply(e);
    bool accepted = true;
    const auto phase = e.phase == 0 ? metrics::TrialPhase::Unaided : metrics::TrialPhase::AiAssisted;
    const auto sid = orchestration::session_id("t", e.reader, phase);
    try {
      switch (e.kind) {
        case TrialEvent::Open: machine.open_session(e.reader, phase, model.now()); break;
        case TrialEvent::Decide: machine.decide(sid, e.case_id, 1, e.elapsed); break;
        case TrialEvent::Finalize: machine.finalize(sid, model.now()); break;
        case TrialEvent::Advance: break;
      }
    } catch (const Error&) {
      accepted = false;
    }
    ++st.events;
    st.illegal += !legal;
    st.mismatches += legal != accepted;
    st.assisted_opened += legal && e.kind == TrialEvent::Open && e.phase == 1;
  }
  return st;
}

}  // namespace vbiopsy::oracle
