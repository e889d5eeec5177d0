#pragma once

#include <map>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <string>
#include <vector>

namespace vbiopsy::metrics {

enum class TrialPhase { Unaided, AiAssisted };
enum class ExperienceBand { Under5, From5To10, Over10 };

std::string_view to_string(TrialPhase phase);
TrialPhase trial_phase_from_string(std::string_view name);
std::string_view to_string(ExperienceBand band);
ExperienceBand experience_from_string(std::string_view name);

struct ReaderDecision {
  std::string case_id;
  int decision = 0;  // 0 = low, 1 = high
  double elapsed_seconds = 0.0;
  bool ai_prediction_shown = false;
};

struct ReaderSession {
  std::string session_id;
  std::string reader_id;
  ExperienceBand experience = ExperienceBand::From5To10;
  TrialPhase phase = TrialPhase::Unaided;
  std::vector<ReaderDecision> entries;
  bool finalized = false;

  /// elapsed > 0 and ai_prediction_shown exactly in the assisted phase.
  void validate() const;
};

struct TimeStats {
  double mean_minutes = 0.0;
  double median_minutes = 0.0;
  double min_minutes = 0.0;
  double max_minutes = 0.0;
  /// Counts per one-minute bin, last bin open-ended at 15 min.
  std::vector<std::size_t> histogram;
  std::size_t reads = 0;
};

struct PhaseSummary {
  double mean_accuracy = 0.0;
  double mean_kappa = 0.0;
  std::size_t readers = 0;
  std::size_t degenerate_kappas = 0;
  TimeStats time;
};

struct AiAloneSummary {
  double accuracy = 0.0;
  double kappa = 0.0;
  std::size_t cases = 0;
};

struct TrialReport {
  std::map<TrialPhase, PhaseSummary> phases;
  std::optional<AiAloneSummary> ai_alone;
  /// band -> phase -> mean reader accuracy
  std::map<ExperienceBand, std::map<TrialPhase, double>> by_experience;
  std::string kappa_pairing = "reader_vs_truth_mean";
};

inline constexpr double kTimeHistogramBinMinutes = 1.0;
inline constexpr std::size_t kTimeHistogramBins = 15;

/// Per-phase mean reader accuracy and reader-vs-truth kappa, AI-alone
/// accuracy/kappa over the truth cases with AI labels, and reading times in
/// minutes. Phases without sessions are omitted.
TrialReport trial_report(const std::vector<ReaderSession>& sessions, const std::map<std::string, int>& truth,
                         const std::map<std::string, int>& ai_predictions);

nlohmann::json to_json(const ReaderSession& session);
ReaderSession session_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrialReport& report);

}  // namespace vbiopsy::metrics
