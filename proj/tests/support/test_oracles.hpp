#pragma once

// Independent reference implementations used by unit and acceptance tests.
// Kept deliberately naive so they share no code with the library.

#include <algorithm>
#include <cmath>
#include <iterator>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vbiopsy/imaging/volume.hpp"
#include "vbiopsy/metrics/trial.hpp"

namespace vbiopsy::oracle {

// P(s_pos > s_neg) + 0.5 P(tie) by visiting every pair.
inline double pair_count_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      ++pairs;
      if (s[i] > s[j]) wins += 1.0;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// Random scores with both classes present; `ties` quantizes to force ties.
inline std::pair<std::vector<double>, std::vector<int>> random_scores(std::mt19937_64& rng, std::size_t n, bool ties) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> s(n);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = u(rng) < 0.5 ? 1 : 0;
    s[i] = ties ? std::round(u(rng) * 4.0) / 4.0 : u(rng);
    if (y[i] == 1) s[i] = std::min(1.0, s[i] + 0.2 * u(rng));
  }
  y[0] = 1;
  y[1] = 0;
  return {s, y};
}

inline double set_dice(const imaging::LabelMask& a, const imaging::LabelMask& b, std::int16_t label) {
  std::vector<std::size_t> sa, sb, both;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    if (a.labels[i] == label) sa.push_back(i);
    if (b.labels[i] == label) sb.push_back(i);
  }
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(both));
  if (sa.empty() && sb.empty()) return 1.0;
  return 2.0 * static_cast<double>(both.size()) / static_cast<double>(sa.size() + sb.size());
}

// Largest 26-connected component per label via union-find.
inline imaging::LabelMask union_find_largest(const imaging::LabelMask& m) {
  const auto d = m.dims();
  const std::size_t n = m.labels.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::int64_t z = 0; z < d.z; ++z)
    for (std::int64_t y = 0; y < d.y; ++y)
      for (std::int64_t x = 0; x < d.x; ++x) {
        const auto v = m.labels(x, y, z);
        if (v == 0) continue;
        for (std::int64_t dz = -1; dz <= 1; ++dz)
          for (std::int64_t dy = -1; dy <= 1; ++dy)
            for (std::int64_t dx = -1; dx <= 1; ++dx) {
              const auto nx = x + dx, ny = y + dy, nz = z + dz;
              if (nx < 0 || ny < 0 || nz < 0 || nx >= d.x || ny >= d.y || nz >= d.z) continue;
              if (m.labels(nx, ny, nz) != v) continue;
              const auto a = find(m.labels.index(x, y, z)), b = find(m.labels.index(nx, ny, nz));
              if (a != b) parent[std::max(a, b)] = std::min(a, b);
            }
      }
  std::map<std::size_t, std::size_t> size;
  for (std::size_t i = 0; i < n; ++i)
    if (m.labels[i] != 0) ++size[find(i)];
  // per label: root of the largest component, earliest root on ties
  std::map<std::int16_t, std::pair<std::size_t, std::size_t>> best;
  for (const auto& [root, count] : size) {
    const auto label = m.labels[root];
    auto it = best.find(label);
    if (it == best.end() || count > it->second.second) best[label] = {root, count};
  }
  imaging::LabelMask out = m;
  for (std::size_t i = 0; i < n; ++i) {
    if (m.labels[i] != 0 && find(i) != best.at(m.labels[i]).first) out.labels[i] = 0;
  }
  return out;
}

inline imaging::LabelMask random_blobs(std::mt19937_64& rng, Dims d, int labels, double fill) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  imaging::LabelMask m{LabelGrid(d, 0), labels > 1 ? imaging::LabelScheme::Zones : imaging::LabelScheme::Gland,
                       {{1, 1, 1}, {0, 0, 0}}};
  for (auto& v : m.labels.values())
    if (u(rng) < fill) v = static_cast<std::int16_t>(1 + rng() % static_cast<std::uint64_t>(labels));
  return m;
}

struct TrialFixture {
  std::vector<metrics::ReaderSession> sessions;
  std::map<std::string, int> truth;
  std::map<std::string, int> ai;
};

// Four readers over 100 cases. Unaided correct counts 70/74/71/73 (mean 0.72),
// assisted 75/79/76/78 (mean 0.77). Reading times alternate 318 +- 60 s and
// 186 +- 40 s so the phase means are 5.3 and 3.1 minutes. AI alone gets 75
// cases right.
inline TrialFixture figure6_fixture() {
  TrialFixture fx;
  const int n = 100;
  for (int i = 0; i < n; ++i) {
    const std::string id = "case-" + std::to_string(1000 + i);
    fx.truth[id] = i % 2;
    fx.ai[id] = i < 75 ? i % 2 : 1 - i % 2;
  }
  const int unaided[4] = {70, 74, 71, 73};
  const int assisted[4] = {75, 79, 76, 78};
  const metrics::ExperienceBand bands[4] = {metrics::ExperienceBand::Under5, metrics::ExperienceBand::From5To10,
                                            metrics::ExperienceBand::From5To10, metrics::ExperienceBand::Over10};
  for (int r = 0; r < 4; ++r) {
    for (int phase = 0; phase < 2; ++phase) {
      metrics::ReaderSession s;
      s.reader_id = "reader-" + std::to_string(r + 1);
      s.session_id = s.reader_id + (phase == 0 ? "-unaided" : "-assisted");
      s.experience = bands[r];
      s.phase = phase == 0 ? metrics::TrialPhase::Unaided : metrics::TrialPhase::AiAssisted;
      s.finalized = true;
      const int correct = phase == 0 ? unaided[r] : assisted[r];
      int i = 0;
      for (const auto& [id, y] : fx.truth) {
        // wrong answers start at a reader-specific offset
        const bool right = ((i + 7 * r) % n) < correct;
        const double base = phase == 0 ? 318.0 : 186.0, swing = phase == 0 ? 60.0 : 40.0;
        s.entries.push_back({id, right ? y : 1 - y, base + (i % 2 == 0 ? swing : -swing), phase == 1});
        ++i;
      }
      fx.sessions.push_back(std::move(s));
    }
  }
  return fx;
}

}  // namespace vbiopsy::oracle
