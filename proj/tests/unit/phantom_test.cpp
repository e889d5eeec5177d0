#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <random>
#include <set>

#include "vbiopsy/phantom/cohort.hpp"
#include "vbiopsy/phantom/manifest.hpp"

namespace vbiopsy::phantom {
namespace {

PhantomParams with_lesion(std::uint64_t seed) {
  PhantomParams p;
  p.rng_seed = seed;
  p.lesion_count = 1;
  return p;
}

TEST(Phantom, DeterministicUnderSeed) {
  const auto a = generate_phantom(with_lesion(3));
  const auto b = generate_phantom(with_lesion(3));
  EXPECT_EQ(a.volume.data, b.volume.data);
  EXPECT_EQ(a.zones.labels, b.zones.labels);
  EXPECT_EQ(a.record.age, b.record.age);
  const auto c = generate_phantom(with_lesion(4));
  EXPECT_NE(a.volume.data, c.volume.data);
}

TEST(Phantom, NoLesionIsLowRisk) {
  PhantomParams p;
  p.rng_seed = 5;
  const auto ph = generate_phantom(p);
  EXPECT_EQ(ph.record.risk, RiskLabel::Low);
  EXPECT_TRUE(ph.record.lesions.empty());
  EXPECT_EQ(ph.record.ggg, 1);
}

TEST(Phantom, ZonesPartitionGland) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto ph = generate_phantom(with_lesion(seed));
    std::size_t pz = 0, tz = 0;
    for (std::size_t i = 0; i < ph.gland.labels.size(); ++i) {
      const auto z = ph.zones.labels[i];
      EXPECT_EQ(ph.gland.labels[i] != 0, z != 0);
      pz += z == imaging::zone::peripheral;
      tz += z == imaging::zone::transition;
    }
    EXPECT_GT(pz, 0u);
    EXPECT_GT(tz, 0u);
  }
}

TEST(Phantom, RiskFollowsGgg) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto p = with_lesion(seed);
    p.lesion_radius_mm = {3.0, 6.0};
    const auto ph = generate_phantom(p);
    ASSERT_TRUE(ph.record.ggg.has_value());
    EXPECT_EQ(ph.record.risk == RiskLabel::High, *ph.record.ggg >= 3);
    double rmax = 0;
    for (const auto& l : ph.record.lesions) rmax = std::max(rmax, l.radius_mm);
    EXPECT_EQ(ph.record.risk == RiskLabel::High, rmax >= p.high_risk_radius_mm);
    EXPECT_NO_THROW(ph.record.validate());
  }
}

TEST(Phantom, CentroidStrictlyInsideGrid) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const auto ph = generate_phantom(with_lesion(seed));
    const auto& d = ph.gland.dims();
    double s[3] = {0, 0, 0}, n = 0;
    for (std::int64_t z = 0; z < d.z; ++z)
      for (std::int64_t y = 0; y < d.y; ++y)
        for (std::int64_t x = 0; x < d.x; ++x)
          if (ph.gland.labels(x, y, z)) s[0] += x, s[1] += y, s[2] += z, n += 1;
    ASSERT_GT(n, 0);
    for (std::size_t a = 0; a < 3; ++a) {
      EXPECT_GT(s[a] / n, 0.0);
      EXPECT_LT(s[a] / n, static_cast<double>(d[a] - 1));
    }
  }
}

TEST(Phantom, LesionsAreHypointense) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const auto p = with_lesion(seed);
    const auto ph = generate_phantom(p);
    ASSERT_EQ(ph.record.lesions.size(), 1u);
    const auto& les = ph.record.lesions[0];
    const auto& g = ph.volume.geometry;
    const auto& d = ph.volume.dims();
    double in_sum = 0, in_n = 0, out_sum = 0, out_n = 0;
    for (std::int64_t z = 0; z < d.z; ++z)
      for (std::int64_t y = 0; y < d.y; ++y)
        for (std::int64_t x = 0; x < d.x; ++x) {
          if (ph.zones.labels(x, y, z) != les.zone) continue;
          const double px = g.origin[0] + x * g.spacing[0], py = g.origin[1] + y * g.spacing[1],
                       pz = g.origin[2] + z * g.spacing[2];
          const double r = std::hypot(px - les.center_mm[0], py - les.center_mm[1], pz - les.center_mm[2]);
          if (r <= les.radius_mm) in_sum += ph.volume.data(x, y, z), in_n += 1;
          else out_sum += ph.volume.data(x, y, z), out_n += 1;
        }
    ASSERT_GT(in_n, 0);
    const double base = les.zone == imaging::zone::peripheral ? p.pz_intensity : p.tz_intensity;
    EXPECT_GE(out_sum / out_n - in_sum / in_n, std::abs(les.contrast) * base - 3.0 * p.noise_sigma) << seed;
  }
}

TEST(Phantom, RejectsInvalidParams) {
  PhantomParams p;
  p.tz_fraction = 1.2;
  EXPECT_THROW(generate_phantom(p), Error);
  p = {};
  p.lesion_contrast = {-1.5, -0.2};
  EXPECT_THROW(generate_phantom(p), Error);
  p = {};
  p.lesion_count = 1;
  p.lesion_radius_mm = {11.0, 12.0};  // not below the minor semi-axis
  EXPECT_THROW(generate_phantom(p), Error);
}

TEST(Cohort, PrevalenceAndIds) {
  CohortSpec spec;
  spec.count = 20;
  spec.high_risk_prevalence = 0.5;
  const auto params = cohort_params(spec);
  ASSERT_EQ(params.size(), 20u);
  int high = 0;
  std::set<std::string> ids;
  for (const auto& p : params) {
    high += p.lesion_count > 0;
    ids.insert(p.case_id);
  }
  EXPECT_EQ(high, 10);
  EXPECT_EQ(ids.size(), 20u);
  EXPECT_EQ(params[7].case_id, "case-0007");
  const auto again = cohort_params(spec);
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i].rng_seed, again[i].rng_seed);
}

std::vector<CaseRecord> records(std::size_t n, std::size_t high, std::uint64_t seed = 0) {
  std::vector<CaseRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    CaseRecord r;
    r.case_id = "c" + std::to_string(i);
    r.age = 60;
    r.psa = 5;
    r.risk = i < high ? RiskLabel::High : RiskLabel::Low;
    out.push_back(r);
  }
  std::shuffle(out.begin(), out.end(), std::mt19937_64(seed));
  return out;
}

TEST(Manifest, PaperRatiosGiveSeventyTenTwenty) {
  const auto m = build_manifest(records(100, 40), {0.7, 0.1, 0.2});
  EXPECT_EQ(m.split("train").size(), 70u);
  EXPECT_EQ(m.split("val").size(), 10u);
  EXPECT_EQ(m.split("test").size(), 20u);
}

TEST(Manifest, InvalidRatiosAndTooFewCases) {
  EXPECT_THROW(build_manifest(records(10, 5), {0.5, 0.5, 0.5}), Error);
  EXPECT_THROW(build_manifest(records(10, 5), {0.7, -0.1, 0.4}), Error);
  EXPECT_THROW(build_manifest(records(2, 1), {0.7, 0.1, 0.2}), Error);
}

// Exhaustive count: every split's positives within one case of the global share.
TEST(Manifest, StratifiedDisjointExhaustiveProperty) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + rng() % 120;
    const std::size_t high = rng() % (n + 1);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::array<double, 3> r{u(rng), u(rng), u(rng)};
    const double s = r[0] + r[1] + r[2];
    for (auto& x : r) x /= s;
    const auto cases = records(n, high, rng());
    const auto m = build_manifest(cases, r, "risk", rng());
    std::map<std::string, int> risk;
    for (const auto& c : cases) risk[c.case_id] = as_int(c.risk);
    std::set<std::string> seen;
    for (std::size_t k = 0; k < 3; ++k) {
      const auto& ids = m.split(kSplitNames[k]);
      EXPECT_LE(std::abs(static_cast<double>(ids.size()) - r[k] * n), 1.0);
      std::size_t pos = 0;
      for (const auto& id : ids) {
        EXPECT_TRUE(seen.insert(id).second) << "duplicate " << id;
        pos += risk.at(id);
      }
      const double expected = static_cast<double>(ids.size()) * static_cast<double>(high) / static_cast<double>(n);
      EXPECT_LE(std::abs(static_cast<double>(pos) - expected), 1.0 + 1e-9) << "trial " << trial;
    }
    EXPECT_EQ(seen.size(), n);
  }
}

TEST(Manifest, JsonRoundTrip) {
  const auto cases = records(30, 9);
  const auto m = build_manifest(cases, {0.7, 0.1, 0.2}, "risk", 4);
  const auto j = to_json(m);
  EXPECT_TRUE(j.contains("splits"));
  EXPECT_EQ(j["stratify_by"], "risk");
  const auto back = manifest_from_json(j);
  EXPECT_EQ(back.splits, m.splits);

  const auto dir = std::filesystem::temp_directory_path() / "vbiopsy_manifest_test";
  std::filesystem::create_directories(dir);
  auto recs = cases;
  recs[0].psa_density = 0.15;
  recs[0].ggg = 4;
  recs[0].risk = RiskLabel::High;
  recs[0].lesions.push_back({{1, 2, 3}, 5.0, -0.5, imaging::zone::peripheral});
  save_cases_jsonl(dir / "cases.jsonl", recs);
  const auto loaded = load_cases_jsonl(dir / "cases.jsonl");
  ASSERT_EQ(loaded.size(), recs.size());
  EXPECT_EQ(loaded[0].psa_density, 0.15);
  EXPECT_EQ(loaded[0].lesions.size(), 1u);
  EXPECT_EQ(loaded[0].lesions[0].radius_mm, 5.0);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace vbiopsy::phantom
