#include "vbiopsy/orchestration/grid.hpp"

#include <chrono>
#include <set>

#include "vbiopsy/common/error.hpp"

namespace vbiopsy::orchestration {

using nlohmann::json;

std::string_view to_string(Objective o) { return o == Objective::Auc ? "auc" : "composite_score"; }

Objective objective_from_string(std::string_view name) {
  if (name == "auc") return Objective::Auc;
  if (name == "composite_score") return Objective::CompositeScore;
  fail(ErrorCode::InvalidArgument, "unknown objective '" + std::string(name) + "'");
}

void GridSpec::validate() const {
  require(!parameters.empty(), ErrorCode::InvalidArgument, "grid has no parameters");
  for (const auto& [name, values] : parameters) {
    require(!name.empty(), ErrorCode::InvalidArgument, "empty grid parameter name");
    require(!values.empty(), ErrorCode::InvalidArgument, "grid parameter '" + name + "' has no values");
    std::set<std::string> seen;
    for (const auto& v : values)
      require(seen.insert(v.dump()).second, ErrorCode::InvalidArgument, "duplicate value for '" + name + "'");
  }
}

std::size_t GridSpec::size() const {
  std::size_t n = 1;
  for (const auto& [name, values] : parameters) n *= values.size();
  return n;
}

GridSpec grid_spec_from_json(const json& j) {
  GridSpec g;
  for (const auto& [name, values] : j.at("parameters").items()) {
    require(values.is_array(), ErrorCode::InvalidArgument, "grid parameter '" + name + "' must list values");
    g.parameters[name] = values.get<std::vector<json>>();
  }
  g.objective = objective_from_string(j.value("objective", std::string("composite_score")));
  g.validate();
  return g;
}

json to_json(const GridSpec& g) {
  return {{"parameters", g.parameters}, {"objective", std::string(to_string(g.objective))}};
}

std::vector<json> cartesian(const GridSpec& g) {
  g.validate();
  std::vector<std::pair<std::string, const std::vector<json>*>> axes;
  for (const auto& [name, values] : g.parameters) axes.emplace_back(name, &values);
  std::vector<std::size_t> idx(axes.size(), 0);
  std::vector<json> out;
  out.reserve(g.size());
  while (true) {
    json combo = json::object();
    for (std::size_t a = 0; a < axes.size(); ++a) combo[axes[a].first] = (*axes[a].second)[idx[a]];
    out.push_back(std::move(combo));
    std::size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < axes[a].second->size()) break;
      idx[a] = 0;
      if (a == 0) return out;
    }
  }
}

json apply_overrides(json base, const json& combo) {
  for (const auto& [key, value] : combo.items()) {
    json* node = &base;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      require(node->is_object() && node->contains(part), ErrorCode::InvalidArgument, "unknown config key '" + key + "'");
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    *node = value;
  }
  return base;
}

GridResult run_grid(const GridSpec& spec, const GridEvaluator& evaluate, const std::filesystem::path& root,
                    const Clock& clock) {
  GridResult result;
  const auto combos = cartesian(spec);
  for (std::size_t i = 0; i < combos.size(); ++i) {
    GridTrial t;
    t.combination = combos[i];
    RunRecord rec;
    rec.command = "grid-trial";
    rec.inputs = {{"index", i}, {"combination", combos[i]}, {"objective", std::string(to_string(spec.objective))}};
    rec.config_hash = config_hash(combos[i]);
    rec.started = iso8601(clock());
    const auto t0 = std::chrono::steady_clock::now();
    try {
      t.report = evaluate(combos[i]);
      const auto& v = spec.objective == Objective::Auc ? t.report->auc : t.report->composite_score;
      if (v.defined()) t.objective = *v.value;
      else t.error = "objective undefined: " + v.undefined_reason;
      rec.outputs = {{"metrics", metrics::to_json(*t.report)}, {"objective", t.objective ? json(*t.objective) : json(nullptr)}};
    } catch (const std::exception& e) {
      t.error = e.what();
      rec.status = "failed";
      rec.error = e.what();
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    t.run_dir = write_run_record(root, rec, clock());
    if (t.objective && (!result.best || *t.objective > *result.trials[*result.best].objective)) result.best = i;
    result.trials.push_back(std::move(t));
  }
  return result;
}

json to_json(const GridResult& r, Objective objective) {
  json trials = json::array();
  for (const auto& t : r.trials)
    trials.push_back({{"combination", t.combination},
                      {"objective", t.objective ? json(*t.objective) : json(nullptr)},
                      {"error", t.error},
                      {"run_dir", t.run_dir.string()}});
  json out{{"objective", std::string(to_string(objective))}, {"trials", trials}};
  if (r.best) {
    out["best_index"] = *r.best;
    out["best"] = r.trials[*r.best].combination;
    out["best_objective"] = *r.trials[*r.best].objective;
  } else {
    out["best"] = nullptr;
  }
  return out;
}

}  // namespace vbiopsy::orchestration
