#include "vbiopsy/phantom/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <set>

namespace vbiopsy::phantom {

using nlohmann::json;

const std::vector<std::string>& Manifest::split(const std::string& name) const {
  auto it = splits.find(name);
  require(it != splits.end(), ErrorCode::NotFound, "manifest has no split '" + name + "'");
  return it->second;
}

std::size_t Manifest::case_count() const {
  std::size_t n = 0;
  for (const auto& [_, ids] : splits) n += ids.size();
  return n;
}

void Manifest::validate() const {
  std::set<std::string> seen;
  for (const auto& [name, ids] : splits) {
    for (const auto& id : ids) {
      require(seen.insert(id).second, ErrorCode::InvalidArgument, "case " + id + " appears in more than one split");
    }
  }
}

namespace {

std::string stratum_of(const CaseRecord& c, const std::string& key) {
  if (key == "risk") return std::string(to_string(c.risk));
  if (key == "ggg") return c.ggg ? std::to_string(*c.ggg) : "none";
  if (key == "none" || key.empty()) return "all";
  fail(ErrorCode::InvalidArgument, "unsupported stratification key '" + key + "'");
}

std::vector<std::size_t> largest_remainder(std::size_t total, const std::vector<double>& shares) {
  std::vector<std::size_t> counts(shares.size());
  std::vector<std::pair<double, std::size_t>> frac;
  std::size_t used = 0;
  for (std::size_t i = 0; i < shares.size(); ++i) {
    const double exact = shares[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    used += counts[i];
    frac.emplace_back(exact - static_cast<double>(counts[i]), i);
  }
  std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) counts[frac[k % frac.size()].second] += 1;
  return counts;
}

}  // namespace

Manifest build_manifest(const std::vector<CaseRecord>& cases, const std::array<double, 3>& ratios,
                        const std::string& stratify_by, std::uint64_t seed) {
  double sum = 0.0;
  for (double r : ratios) {
    require(std::isfinite(r) && r > 0.0, ErrorCode::InvalidArgument, "split ratios must be positive");
    sum += r;
  }
  require(std::abs(sum - 1.0) <= 1e-9, ErrorCode::InvalidArgument, "split ratios must sum to 1");
  require(cases.size() >= ratios.size(), ErrorCode::InvalidArgument, "fewer cases than splits");

  const std::size_t n = cases.size();
  const auto split_sizes = largest_remainder(n, {ratios.begin(), ratios.end()});

  std::map<std::string, std::vector<std::string>> strata;
  for (const auto& c : cases) strata[stratum_of(c, stratify_by)].push_back(c.case_id);

  // Allocation matrix strata x splits with margins (stratum size, split size),
  // each cell rounded down or up from its proportional share.
  std::vector<std::string> keys;
  for (auto& [k, ids] : strata) {
    std::sort(ids.begin(), ids.end());
    keys.push_back(k);
  }
  const std::size_t ns = ratios.size();
  std::vector<std::vector<std::size_t>> alloc(keys.size(), std::vector<std::size_t>(ns));
  std::vector<std::size_t> row_left(keys.size()), col_left(split_sizes);
  struct Cell {
    double frac;
    std::size_t k, s;
  };
  std::vector<Cell> cells;
  for (std::size_t k = 0; k < keys.size(); ++k) {
    const auto m = strata[keys[k]].size();
    row_left[k] = m;
    for (std::size_t s = 0; s < ns; ++s) {
      const double exact = static_cast<double>(m) * static_cast<double>(split_sizes[s]) / static_cast<double>(n);
      alloc[k][s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
      row_left[k] -= alloc[k][s];
      col_left[s] -= alloc[k][s];
      cells.push_back({exact - static_cast<double>(alloc[k][s]), k, s});
    }
  }
  std::stable_sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) { return a.frac > b.frac; });
  for (const auto& c : cells) {
    if (row_left[c.k] > 0 && col_left[c.s] > 0 && c.frac > 1e-12) {
      alloc[c.k][c.s] += 1;
      --row_left[c.k];
      --col_left[c.s];
    }
  }
  for (std::size_t k = 0; k < keys.size(); ++k) {
    for (std::size_t s = 0; s < ns && row_left[k] > 0; ++s) {
      const auto take = std::min(row_left[k], col_left[s]);
      alloc[k][s] += take;
      row_left[k] -= take;
      col_left[s] -= take;
    }
  }

  Manifest manifest;
  manifest.ratios = ratios;
  manifest.stratify_by = stratify_by;
  for (const auto& name : kSplitNames) manifest.splits[name] = {};
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < keys.size(); ++k) {
    auto ids = strata[keys[k]];
    std::shuffle(ids.begin(), ids.end(), rng);
    std::size_t offset = 0;
    for (std::size_t s = 0; s < ns; ++s) {
      auto& dst = manifest.splits[kSplitNames[s]];
      dst.insert(dst.end(), ids.begin() + static_cast<std::ptrdiff_t>(offset),
                 ids.begin() + static_cast<std::ptrdiff_t>(offset + alloc[k][s]));
      offset += alloc[k][s];
    }
  }
  for (auto& [_, ids] : manifest.splits) std::sort(ids.begin(), ids.end());
  manifest.validate();
  return manifest;
}

json to_json(const Manifest& manifest) {
  json j;
  j["splits"] = manifest.splits;
  j["ratios"] = manifest.ratios;
  j["stratify_by"] = manifest.stratify_by;
  return j;
}

Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.splits = j.at("splits").get<std::map<std::string, std::vector<std::string>>>();
  m.ratios = j.at("ratios").get<std::array<double, 3>>();
  m.stratify_by = j.value("stratify_by", std::string("risk"));
  m.validate();
  return m;
}

void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::Io, "cannot write " + path.string());
  out << to_json(manifest).dump(2) << '\n';
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::NotFound, "cannot read manifest " + path.string());
  return manifest_from_json(json::parse(in));
}

json to_json(const CaseRecord& r) {
  json j;
  j["case_id"] = r.case_id;
  j["volume_ref"] = r.volume_ref;
  j["age"] = r.age;
  j["psa"] = r.psa;
  j["psa_density"] = r.psa_density ? json(*r.psa_density) : json(nullptr);
  j["ggg"] = r.ggg ? json(*r.ggg) : json(nullptr);
  j["risk"] = std::string(to_string(r.risk));
  j["lesions"] = json::array();
  for (const auto& l : r.lesions) {
    j["lesions"].push_back({{"center_mm", l.center_mm}, {"radius_mm", l.radius_mm}, {"contrast", l.contrast}, {"zone", l.zone}});
  }
  return j;
}

CaseRecord case_from_json(const json& j) {
  CaseRecord r;
  r.case_id = j.at("case_id").get<std::string>();
  r.volume_ref = j.value("volume_ref", std::string());
  r.age = j.at("age").get<double>();
  r.psa = j.at("psa").get<double>();
  if (j.contains("psa_density") && !j["psa_density"].is_null()) r.psa_density = j["psa_density"].get<double>();
  if (j.contains("ggg") && !j["ggg"].is_null()) r.ggg = j["ggg"].get<int>();
  r.risk = risk_from_string(j.at("risk").get<std::string>());
  if (j.contains("lesions")) {
    for (const auto& l : j["lesions"]) {
      r.lesions.push_back({l.at("center_mm").get<Vec3>(), l.at("radius_mm").get<double>(), l.at("contrast").get<double>(),
                           l.at("zone").get<std::int16_t>()});
    }
  }
  r.validate();
  return r;
}

void save_cases_jsonl(const std::filesystem::path& path, const std::vector<CaseRecord>& cases) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::Io, "cannot write " + path.string());
  for (const auto& c : cases) out << to_json(c).dump() << '\n';
}

std::vector<CaseRecord> load_cases_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::NotFound, "cannot read cases " + path.string());
  std::vector<CaseRecord> cases;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    cases.push_back(case_from_json(json::parse(line)));
  }
  return cases;
}

}  // namespace vbiopsy::phantom
