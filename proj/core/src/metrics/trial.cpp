#include "vbiopsy/metrics/trial.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>

#include "vbiopsy/common/error.hpp"
#include "vbiopsy/metrics/classification.hpp"

namespace vbiopsy::metrics {

using nlohmann::json;

std::string_view to_string(TrialPhase phase) { return phase == TrialPhase::Unaided ? "unaided" : "ai_assisted"; }

TrialPhase trial_phase_from_string(std::string_view name) {
  if (name == "unaided") return TrialPhase::Unaided;
  if (name == "ai_assisted") return TrialPhase::AiAssisted;
  fail(ErrorCode::InvalidArgument, "unknown trial phase '" + std::string(name) + "'");
}

std::string_view to_string(ExperienceBand band) {
  switch (band) {
    case ExperienceBand::Under5: return "<5y";
    case ExperienceBand::From5To10: return "5-10y";
    case ExperienceBand::Over10: return ">10y";
  }
  return "unknown";
}

ExperienceBand experience_from_string(std::string_view name) {
  if (name == "<5y") return ExperienceBand::Under5;
  if (name == "5-10y") return ExperienceBand::From5To10;
  if (name == ">10y") return ExperienceBand::Over10;
  fail(ErrorCode::InvalidArgument, "unknown experience band '" + std::string(name) + "'");
}

void ReaderSession::validate() const {
  require(!reader_id.empty(), ErrorCode::InvalidArgument, "session needs a reader id");
  for (const auto& e : entries) {
    require(e.elapsed_seconds > 0.0 && std::isfinite(e.elapsed_seconds), ErrorCode::InvalidArgument,
            "elapsed_seconds must be > 0");
    require(e.decision == 0 || e.decision == 1, ErrorCode::InvalidArgument, "decision must be low or high");
    require(e.ai_prediction_shown == (phase == TrialPhase::AiAssisted), ErrorCode::InvalidArgument,
            "ai_prediction_shown must match the session phase");
  }
}

namespace {

TimeStats time_stats(std::vector<double> minutes) {
  TimeStats t;
  t.histogram.assign(kTimeHistogramBins, 0);
  t.reads = minutes.size();
  if (minutes.empty()) return t;
  std::sort(minutes.begin(), minutes.end());
  t.mean_minutes = std::accumulate(minutes.begin(), minutes.end(), 0.0) / static_cast<double>(minutes.size());
  const std::size_t n = minutes.size();
  t.median_minutes = n % 2 == 1 ? minutes[n / 2] : 0.5 * (minutes[n / 2 - 1] + minutes[n / 2]);
  t.min_minutes = minutes.front();
  t.max_minutes = minutes.back();
  for (double m : minutes) {
    const auto bin = std::min<std::size_t>(static_cast<std::size_t>(m / kTimeHistogramBinMinutes), kTimeHistogramBins - 1);
    t.histogram[bin] += 1;
  }
  return t;
}

}  // namespace

TrialReport trial_report(const std::vector<ReaderSession>& sessions, const std::map<std::string, int>& truth,
                         const std::map<std::string, int>& ai_predictions) {
  require(!sessions.empty(), ErrorCode::InvalidArgument, "trial report needs at least one session");
  TrialReport report;
  struct Acc {
    std::vector<double> accuracy, kappa, minutes;
    std::size_t degenerate = 0;
  };
  std::map<TrialPhase, Acc> acc;
  std::map<ExperienceBand, std::map<TrialPhase, std::vector<double>>> by_band;

  for (const auto& s : sessions) {
    s.validate();
    if (s.entries.empty()) continue;
    std::vector<int> decisions, labels;
    auto& a = acc[s.phase];
    for (const auto& e : s.entries) {
      auto it = truth.find(e.case_id);
      require(it != truth.end(), ErrorCode::NotFound, "session " + s.session_id + " reads unknown case " + e.case_id);
      decisions.push_back(e.decision);
      labels.push_back(it->second);
      a.minutes.push_back(e.elapsed_seconds / 60.0);
    }
    const auto c = confusion(decisions, labels);
    const double accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(decisions.size());
    const auto kappa = cohens_kappa(decisions, labels);
    a.accuracy.push_back(accuracy);
    a.kappa.push_back(kappa.value);
    a.degenerate += kappa.degenerate ? 1 : 0;
    by_band[s.experience][s.phase].push_back(accuracy);
  }

  auto mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  for (auto& [phase, a] : acc) {
    PhaseSummary p;
    p.mean_accuracy = mean(a.accuracy);
    p.mean_kappa = mean(a.kappa);
    p.readers = a.accuracy.size();
    p.degenerate_kappas = a.degenerate;
    p.time = time_stats(a.minutes);
    report.phases[phase] = p;
  }
  for (auto& [band, phases] : by_band) {
    for (auto& [phase, v] : phases) report.by_experience[band][phase] = mean(v);
  }

  std::vector<int> ai, labels;
  for (const auto& [id, label] : truth) {
    auto it = ai_predictions.find(id);
    if (it == ai_predictions.end()) continue;
    ai.push_back(it->second);
    labels.push_back(label);
  }
  if (!ai.empty()) {
    const auto c = confusion(ai, labels);
    report.ai_alone = AiAloneSummary{static_cast<double>(c.tp + c.tn) / static_cast<double>(ai.size()),
                                     cohens_kappa(ai, labels).value, ai.size()};
  }
  return report;
}

json to_json(const ReaderSession& s) {
  json j;
  j["session_id"] = s.session_id;
  j["reader_id"] = s.reader_id;
  j["experience"] = std::string(to_string(s.experience));
  j["phase"] = std::string(to_string(s.phase));
  j["finalized"] = s.finalized;
  j["entries"] = json::array();
  for (const auto& e : s.entries) {
    j["entries"].push_back({{"case_id", e.case_id},
                            {"decision", e.decision == 1 ? "high" : "low"},
                            {"elapsed_seconds", e.elapsed_seconds},
                            {"ai_prediction_shown", e.ai_prediction_shown}});
  }
  return j;
}

ReaderSession session_from_json(const json& j) {
  ReaderSession s;
  s.session_id = j.value("session_id", std::string());
  s.reader_id = j.at("reader_id").get<std::string>();
  s.experience = experience_from_string(j.value("experience", std::string("5-10y")));
  s.phase = trial_phase_from_string(j.at("phase").get<std::string>());
  s.finalized = j.value("finalized", false);
  for (const auto& e : j.at("entries")) {
    const auto d = e.at("decision").get<std::string>();
    require(d == "low" || d == "high", ErrorCode::InvalidArgument, "decision must be 'low' or 'high'");
    s.entries.push_back({e.at("case_id").get<std::string>(), d == "high" ? 1 : 0, e.at("elapsed_seconds").get<double>(),
                         e.value("ai_prediction_shown", s.phase == TrialPhase::AiAssisted)});
  }
  s.validate();
  return s;
}

json to_json(const TrialReport& r) {
  json j;
  j["phases"] = json::object();
  for (const auto& [phase, p] : r.phases) {
    j["phases"][std::string(to_string(phase))] = {
        {"mean_accuracy", p.mean_accuracy},
        {"mean_kappa", p.mean_kappa},
        {"readers", p.readers},
        {"degenerate_kappas", p.degenerate_kappas},
        {"time",
         {{"mean_minutes", p.time.mean_minutes},
          {"median_minutes", p.time.median_minutes},
          {"min_minutes", p.time.min_minutes},
          {"max_minutes", p.time.max_minutes},
          {"histogram", p.time.histogram},
          {"histogram_bin_minutes", kTimeHistogramBinMinutes},
          {"reads", p.time.reads}}}};
  }
  if (r.ai_alone) {
    j["ai_alone"] = {{"accuracy", r.ai_alone->accuracy}, {"kappa", r.ai_alone->kappa}, {"cases", r.ai_alone->cases}};
  } else {
    j["ai_alone"] = nullptr;
  }
  j["by_experience"] = json::object();
  for (const auto& [band, phases] : r.by_experience) {
    for (const auto& [phase, v] : phases) j["by_experience"][std::string(to_string(band))][std::string(to_string(phase))] = v;
  }
  j["metadata"] = {{"kappa_pairing", r.kappa_pairing},
                   {"kappa_note", "kappa is computed per reader against ground truth and averaged; "
                                  "inter-reader agreement is not reported"}};
  return j;
}

}  // namespace vbiopsy::metrics
