#include "vbiopsy/counterfactual/counterfactual.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>

#include "vbiopsy/imaging/nifti.hpp"
#include "vbiopsy/nn/tensor.hpp"

namespace vbiopsy::counterfactual {

using nlohmann::json;

LatentModel latent_model(const VaeGanState& state) {
  auto enc = state.encoder;
  auto dec = state.decoder;
  require(!enc.is_empty() && !dec.is_empty(), ErrorCode::MissingPrerequisite, "vae-gan is not initialized");
  return {[enc](const torch::Tensor& x) mutable { return enc(x.to(torch::kFloat32)).first; },
          [dec](const torch::Tensor& z) mutable { return dec(z.to(torch::kFloat32)); }};
}

torch::Tensor latent_gradient(const torch::Tensor& z, const TensorFn& decode, const TensorFn& classify, GradientMode mode,
                              bool probability) {
  require(torch::isfinite(z).all().item<bool>(), ErrorCode::NonFinite, "latent code is not finite");
  auto score = [&](const torch::Tensor& zz) {
    auto s = classify(decode(zz));
    return probability ? torch::sigmoid(s) : s;
  };
  torch::Tensor grad;
  if (mode == GradientMode::Exact) {
    torch::AutoGradMode enable(true);
    auto zz = z.detach().clone().requires_grad_(true);
    score(zz).sum().backward();
    grad = zz.grad().detach();
    require(grad.defined(), ErrorCode::InvalidArgument, "classifier output does not depend on the latent code");
  } else {
    torch::NoGradGuard guard;
    const auto base = z.detach().contiguous();
    auto flat = base.flatten();
    grad = torch::zeros_like(flat);
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
      auto plus = flat.clone(), minus = flat.clone();
      plus[i] += kFiniteDifferenceStep;
      minus[i] -= kFiniteDifferenceStep;
      const double fp = score(plus.view(base.sizes())).sum().item<double>();
      const double fm = score(minus.view(base.sizes())).sum().item<double>();
      grad[i] = (fp - fm) / (2.0 * kFiniteDifferenceStep);
    }
    grad = grad.view(base.sizes());
  }
  require(torch::isfinite(grad).all().item<bool>(), ErrorCode::NonFinite, "latent gradient is not finite");
  return grad;
}

std::vector<double> CounterfactualConfig::schedule() const {
  if (!alphas.empty()) return alphas;
  std::vector<double> out(static_cast<std::size_t>(points));
  const int half = points / 2;
  for (int i = 0; i < points; ++i) out[static_cast<std::size_t>(i)] = alpha_max * (i - half) / half;
  return out;
}

void CounterfactualConfig::validate() const {
  if (alphas.empty()) {
    require(points >= 3 && points % 2 == 1, ErrorCode::InvalidArgument, "default sweep needs an odd point count >= 3");
    require(alpha_max > 0 && std::isfinite(alpha_max), ErrorCode::InvalidArgument, "alpha_max must be positive");
  } else {
    for (std::size_t i = 0; i < alphas.size(); ++i) {
      require(std::isfinite(alphas[i]), ErrorCode::InvalidArgument, "alpha schedule must be finite");
      require(i == 0 || alphas[i] > alphas[i - 1], ErrorCode::InvalidArgument, "alpha schedule must be strictly increasing");
    }
    require(std::find(alphas.begin(), alphas.end(), 0.0) != alphas.end(), ErrorCode::InvalidArgument,
            "alpha schedule must include 0");
  }
  require(shift_threshold > 0 && shift_threshold < 1, ErrorCode::InvalidArgument, "shift threshold must be in (0, 1)");
  require(fidelity_threshold > 0 && fidelity_threshold <= 1, ErrorCode::InvalidArgument,
          "fidelity threshold must be in (0, 1]");
}

json to_json(const CounterfactualConfig& c) {
  return {{"alphas", c.schedule()},
          {"mode", c.mode == SweepMode::Linear ? "linear" : "iterative"},
          {"gradient", c.gradient == GradientMode::Exact ? "exact" : "finite_difference"},
          {"probability_gradient", c.probability_gradient},
          {"normalize_gradient", c.normalize_gradient},
          {"shift_threshold", c.shift_threshold},
          {"fidelity_threshold", c.fidelity_threshold},
          {"aggregate", c.aggregate == HeatmapAggregate::Mean ? "mean" : "min"}};
}

CounterfactualConfig counterfactual_config_from_json(const json& j) {
  CounterfactualConfig c;
  c.alphas = j.value("alphas", c.alphas);
  c.alpha_max = j.value("alpha_max", c.alpha_max);
  c.points = j.value("points", c.points);
  const auto mode = j.value("mode", std::string("linear"));
  require(mode == "linear" || mode == "iterative", ErrorCode::InvalidArgument, "mode must be 'linear' or 'iterative'");
  c.mode = mode == "linear" ? SweepMode::Linear : SweepMode::Iterative;
  const auto grad = j.value("gradient", std::string("exact"));
  require(grad == "exact" || grad == "finite_difference", ErrorCode::InvalidArgument,
          "gradient must be 'exact' or 'finite_difference'");
  c.gradient = grad == "exact" ? GradientMode::Exact : GradientMode::FiniteDifference;
  c.probability_gradient = j.value("probability_gradient", c.probability_gradient);
  c.normalize_gradient = j.value("normalize_gradient", c.normalize_gradient);
  c.shift_threshold = j.value("shift_threshold", c.shift_threshold);
  c.fidelity_threshold = j.value("fidelity_threshold", c.fidelity_threshold);
  const auto agg = j.value("aggregate", std::string("mean"));
  require(agg == "mean" || agg == "min", ErrorCode::InvalidArgument, "aggregate must be 'mean' or 'min'");
  c.aggregate = agg == "mean" ? HeatmapAggregate::Mean : HeatmapAggregate::Min;
  c.validate();
  return c;
}

namespace {
std::string rejection_message(const std::string& id, double dp, double threshold) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s: reconstruction shifts the prediction by %.4f (gate requires < %.3g)", id.c_str(), dp,
                threshold);
  return buf;
}
}  // namespace

FidelityRejected::FidelityRejected(const std::string& case_id, double delta_p, double threshold)
    : Error(ErrorCode::Unprocessable, rejection_message(case_id, delta_p, threshold)), delta_p_(delta_p) {}

std::pair<std::optional<double>, std::optional<double>> shift_bounds(const std::vector<double>& alphas,
                                                                     const std::vector<double>& predictions,
                                                                     double threshold) {
  require(alphas.size() == predictions.size(), ErrorCode::InvalidArgument, "alphas and predictions differ in length");
  const auto zero = std::find(alphas.begin(), alphas.end(), 0.0);
  require(zero != alphas.end(), ErrorCode::InvalidArgument, "alpha schedule must include 0");
  const double p0 = predictions[static_cast<std::size_t>(zero - alphas.begin())];
  std::optional<double> lower, upper;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (std::abs(predictions[i] - p0) < threshold) continue;
    if (alphas[i] < 0 && (!lower || alphas[i] < *lower)) lower = alphas[i];
    if (alphas[i] > 0 && (!upper || alphas[i] > *upper)) upper = alphas[i];
  }
  return {lower, upper};
}

CounterfactualJob generate_counterfactuals(const std::string& case_id, const torch::Tensor& x, const LatentModel& model,
                                           const TensorFn& classify, const CounterfactualConfig& cfg) {
  cfg.validate();
  require(x.dim() == 5 && x.size(0) == 1 && x.size(1) == 1, ErrorCode::GeometryMismatch,
          "counterfactual input must be [1, 1, z, y, x]");
  auto prob = [&](const torch::Tensor& img) {
    torch::NoGradGuard guard;
    return torch::sigmoid(classify(img).to(torch::kFloat64)).item<double>();
  };
  auto grad_at = [&](const torch::Tensor& z) {
    auto g = latent_gradient(z, model.decode, classify, cfg.gradient, cfg.probability_gradient);
    if (cfg.normalize_gradient) {
      const double norm = g.norm().item<double>();
      if (norm > 0) g = g / norm;
    }
    return g;
  };

  CounterfactualJob job;
  job.case_id = case_id;
  job.alphas = cfg.schedule();
  job.mode = cfg.mode;
  torch::Tensor xbar;
  {
    torch::NoGradGuard guard;
    job.z_orig = model.encode_mean(x).detach();
    xbar = model.decode(job.z_orig).detach();
  }
  job.input_prediction = prob(x);
  job.reconstruction_prediction = prob(xbar);
  job.delta_p = std::abs(job.input_prediction - job.reconstruction_prediction);
  if (!(job.delta_p < cfg.fidelity_threshold)) throw FidelityRejected(case_id, job.delta_p, cfg.fidelity_threshold);
  job.reconstruction = nn::to_grid(xbar.to(torch::kFloat64));

  const std::size_t n = job.alphas.size();
  const auto i0 = static_cast<std::size_t>(std::find(job.alphas.begin(), job.alphas.end(), 0.0) - job.alphas.begin());
  std::vector<torch::Tensor> zs(n);
  zs[i0] = job.z_orig;
  if (cfg.mode == SweepMode::Linear) {
    const auto g = grad_at(job.z_orig);
    for (std::size_t i = 0; i < n; ++i) zs[i] = job.z_orig + job.alphas[i] * g;
  } else {
    // walk outward from 0, re-evaluating the gradient at each step
    for (std::size_t i = i0 + 1; i < n; ++i) zs[i] = zs[i - 1] + (job.alphas[i] - job.alphas[i - 1]) * grad_at(zs[i - 1]);
    for (std::size_t i = i0; i-- > 0;) zs[i] = zs[i + 1] + (job.alphas[i] - job.alphas[i + 1]) * grad_at(zs[i + 1]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    torch::Tensor img;
    {
      torch::NoGradGuard guard;
      img = model.decode(zs[i]).detach();
    }
    const double p = prob(img);
    require(std::isfinite(p), ErrorCode::NonFinite, case_id + ": counterfactual prediction is not finite");
    job.predictions.push_back(p);
    job.images.push_back(nn::to_grid(img.to(torch::kFloat64)));
  }
  std::tie(job.alpha_lower, job.alpha_upper) = shift_bounds(job.alphas, job.predictions, cfg.shift_threshold);
  return job;
}

HeatmapSet heatmaps(const std::vector<ScalarGrid>& cfs, const ScalarGrid& ref, HeatmapAggregate aggregate) {
  require(!cfs.empty(), ErrorCode::InvalidArgument, "heatmaps need at least one counterfactual");
  for (const auto& c : cfs) require(c.dims() == ref.dims(), ErrorCode::GeometryMismatch, "counterfactual shape differs");
  HeatmapSet out;
  out.aggregate = ScalarGrid(ref.dims(), aggregate == HeatmapAggregate::Mean ? 0.0 : std::numeric_limits<double>::infinity());
  for (const auto& c : cfs) {
    for (std::size_t v = 0; v < ref.size(); ++v) {
      const double d = std::abs(c[v] - ref[v]);
      if (aggregate == HeatmapAggregate::Mean) out.aggregate[v] += d;
      else out.aggregate[v] = std::min(out.aggregate[v], d);
    }
  }
  if (aggregate == HeatmapAggregate::Mean)
    for (auto& v : out.aggregate.values()) v /= static_cast<double>(cfs.size());
  for (std::size_t i = 0; i + 1 < cfs.size(); ++i) {
    ScalarGrid s(ref.dims());
    for (std::size_t v = 0; v < ref.size(); ++v) s[v] = std::abs(cfs[i + 1][v] - cfs[i][v]);
    out.sequential.push_back(std::move(s));
  }
  return out;
}

std::array<std::int64_t, 3> peak_voxel(const ScalarGrid& grid) {
  require(grid.size() > 0, ErrorCode::InvalidArgument, "empty grid has no peak");
  const auto& v = grid.values();
  const auto idx = static_cast<std::int64_t>(std::max_element(v.begin(), v.end()) - v.begin());
  const auto d = grid.dims();
  return {idx % d.x, (idx / d.x) % d.y, idx / (d.x * d.y)};
}

FidelityReport fidelity_partition(const std::map<std::string, double>& delta_p, double threshold) {
  require(threshold > 0, ErrorCode::InvalidArgument, "fidelity threshold must be > 0");
  FidelityReport r;
  r.threshold = threshold;
  r.delta_p = delta_p;
  r.histogram.assign(kFidelityBins + 1, 0);
  for (const auto& [id, dp] : delta_p) {
    require(std::isfinite(dp) && dp >= 0, ErrorCode::InvalidArgument, id + ": delta p must be finite and >= 0");
    (dp < threshold ? r.passed : r.failed).push_back(id);
    // the small nudge keeps exact bin edges such as 0.06 out of the lower bin
    const auto bin = static_cast<std::size_t>(std::floor(dp / kFidelityBinWidth + 1e-9));
    ++r.histogram[std::min(bin, kFidelityBins)];
  }
  return r;
}

FidelityReport reconstruction_fidelity(const std::vector<FidelityCase>& cases, const LatentModel& model, double threshold) {
  std::map<std::string, double> dp;
  torch::NoGradGuard guard;
  for (const auto& c : cases) {
    const auto xbar = model.decode(model.encode_mean(c.x));
    const double p = torch::sigmoid(c.classify(c.x).to(torch::kFloat64)).item<double>();
    const double pbar = torch::sigmoid(c.classify(xbar).to(torch::kFloat64)).item<double>();
    require(dp.emplace(c.case_id, std::abs(p - pbar)).second, ErrorCode::InvalidArgument,
            "duplicate case id " + c.case_id);
  }
  return fidelity_partition(dp, threshold);
}

json to_json(const FidelityReport& r) {
  json bins = json::array();
  for (std::size_t i = 0; i < r.histogram.size(); ++i) {
    bins.push_back({{"lower", static_cast<double>(i) * kFidelityBinWidth},
                    {"upper", i < kFidelityBins ? json(static_cast<double>(i + 1) * kFidelityBinWidth) : json(nullptr)},
                    {"count", r.histogram[i]}});
  }
  return {{"threshold", r.threshold}, {"delta_p", r.delta_p}, {"passed", r.passed}, {"failed", r.failed}, {"histogram", bins}};
}

json trace_json(const CounterfactualJob& job) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"case_id", job.case_id},
          {"alphas", job.alphas},
          {"predictions", job.predictions},
          {"bounds", {{"lower", opt(job.alpha_lower)}, {"upper", opt(job.alpha_upper)}}},
          {"fidelity",
           {{"delta_p", job.delta_p},
            {"input_prediction", job.input_prediction},
            {"reconstruction_prediction", job.reconstruction_prediction}}},
          {"mode", job.mode == SweepMode::Linear ? "linear" : "iterative"}};
}

void save_job(const std::filesystem::path& dir, const CounterfactualJob& job, const HeatmapSet& maps,
              const imaging::Geometry& geometry) {
  std::filesystem::create_directories(dir);
  auto name = [](const char* stem, std::size_t i) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%s_%02zu.nii.gz", stem, i);
    return std::string(buf);
  };
  auto trace = trace_json(job);
  trace["images"] = json::array();
  for (std::size_t i = 0; i < job.images.size(); ++i) {
    imaging::write_nifti(dir / name("cf", i), imaging::Volume3D{job.images[i], geometry});
    trace["images"].push_back(name("cf", i));
  }
  imaging::write_nifti(dir / "reconstruction.nii.gz", imaging::Volume3D{job.reconstruction, geometry});
  imaging::write_nifti(dir / "heatmap_aggregate.nii.gz", imaging::Volume3D{maps.aggregate, geometry});
  trace["heatmaps"] = {{"aggregate", "heatmap_aggregate.nii.gz"}, {"sequential", json::array()}};
  for (std::size_t i = 0; i < maps.sequential.size(); ++i) {
    imaging::write_nifti(dir / name("heatmap_seq", i), imaging::Volume3D{maps.sequential[i], geometry});
    trace["heatmaps"]["sequential"].push_back(name("heatmap_seq", i));
  }
  std::ofstream out(dir / "trace.json");
  require(out.good(), ErrorCode::Io, "cannot write " + (dir / "trace.json").string());
  out << trace.dump(2);
}

}  // namespace vbiopsy::counterfactual
