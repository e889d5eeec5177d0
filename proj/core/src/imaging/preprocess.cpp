#include "vbiopsy/imaging/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vbiopsy::imaging {
namespace {

// Interpolating cubic B-spline coefficients for one line. The end coefficients
// equal the end samples, which is the point-symmetric extension
// c[-1] = 2c[0] - c[1]; it reproduces constants and linear ramps exactly.
std::vector<double> bspline_coefficients(std::span<const double> f) {
  const std::size_t n = f.size();
  std::vector<double> c(f.begin(), f.end());
  if (n <= 2) return c;
  const std::size_t m = n - 2;
  std::vector<double> cp(m), dp(m);
  for (std::size_t k = 0; k < m; ++k) {
    double rhs = 6.0 * f[k + 1];
    if (k == 0) rhs -= c[0];
    if (k == m - 1) rhs -= c[n - 1];
    const double denom = 4.0 - (k == 0 ? 0.0 : cp[k - 1]);
    cp[k] = 1.0 / denom;
    dp[k] = (rhs - (k == 0 ? 0.0 : dp[k - 1])) / denom;
  }
  c[m] = dp[m - 1];
  for (std::size_t k = m - 1; k-- > 0;) c[k + 1] = dp[k] - cp[k] * c[k + 2];
  return c;
}

double bspline_eval(const std::vector<double>& c, double t) {
  const auto n = static_cast<std::int64_t>(c.size());
  if (n == 1) return c[0];
  t = std::clamp(t, 0.0, static_cast<double>(n - 1));
  auto i = static_cast<std::int64_t>(std::floor(t));
  if (i >= n - 1) i = n - 2;
  const double u = t - static_cast<double>(i);
  auto coef = [&](std::int64_t k) {
    if (k < 0) return 2.0 * c[0] - c[1];
    if (k >= n) return 2.0 * c[n - 1] - c[n - 2];
    return c[k];
  };
  const double u2 = u * u, u3 = u2 * u;
  const double w0 = (1.0 - u) * (1.0 - u) * (1.0 - u) / 6.0;
  const double w1 = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0;
  const double w2 = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0;
  const double w3 = u3 / 6.0;
  return w0 * coef(i - 1) + w1 * coef(i) + w2 * coef(i + 1) + w3 * coef(i + 2);
}

template <typename T>
Grid3D<T> resample_axis(const Grid3D<T>& in, std::size_t axis, std::int64_t out_n, double step,
                        Interpolation mode) {
  Dims od = in.dims();
  const std::int64_t n = od[axis];
  od[axis] = out_n;
  Grid3D<T> out(od);
  const Dims& id = in.dims();
  // Iterate over every line parallel to `axis`.
  const std::int64_t a1 = axis == 0 ? id.y : id.x;
  const std::int64_t a2 = axis == 2 ? id.y : id.z;
  std::vector<double> line(static_cast<std::size_t>(n));
  for (std::int64_t j = 0; j < a2; ++j) {
    for (std::int64_t i = 0; i < a1; ++i) {
      auto at = [&](std::int64_t k) -> std::array<std::int64_t, 3> {
        if (axis == 0) return {k, i, j};
        if (axis == 1) return {i, k, j};
        return {i, j, k};
      };
      for (std::int64_t k = 0; k < n; ++k) {
        auto p = at(k);
        line[static_cast<std::size_t>(k)] = static_cast<double>(in(p[0], p[1], p[2]));
      }
      if (mode == Interpolation::Nearest) {
        for (std::int64_t k = 0; k < out_n; ++k) {
          const double t = std::clamp(static_cast<double>(k) * step, 0.0, static_cast<double>(n - 1));
          const auto src = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(t + 0.5)), n - 1);
          auto p = at(k);
          auto q = at(src);
          out(p[0], p[1], p[2]) = in(q[0], q[1], q[2]);
        }
      } else {
        const auto coeffs = bspline_coefficients(line);
        for (std::int64_t k = 0; k < out_n; ++k) {
          auto p = at(k);
          out(p[0], p[1], p[2]) = static_cast<T>(bspline_eval(coeffs, static_cast<double>(k) * step));
        }
      }
    }
  }
  return out;
}

template <typename T>
Grid3D<T> resample_grid(const Grid3D<T>& grid, const Vec3& spacing, const Vec3& target, Interpolation mode) {
  const Dims od = resampled_dims(grid.dims(), spacing, target);
  Grid3D<T> cur = grid;
  for (std::size_t axis = 0; axis < 3; ++axis) {
    if (spacing[axis] == target[axis]) continue;
    cur = resample_axis(cur, axis, od[axis], target[axis] / spacing[axis], mode);
  }
  return cur;
}

}  // namespace

Dims resampled_dims(const Dims& dims, const Vec3& spacing, const Vec3& target) {
  Dims out = dims;
  for (std::size_t a = 0; a < 3; ++a) {
    if (spacing[a] == target[a]) continue;
    const double extent = static_cast<double>(dims[a]) * spacing[a] / target[a];
    out[a] = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(extent - 1e-9)));
  }
  return out;
}

Volume3D resample(const Volume3D& vol, const Vec3& target_spacing, Interpolation mode) {
  vol.validate();
  validate_spacing(target_spacing);
  Volume3D out{resample_grid(vol.data, vol.geometry.spacing, target_spacing, mode),
               {target_spacing, vol.geometry.origin}};
  return out;
}

LabelMask resample(const LabelMask& mask, const Vec3& target_spacing) {
  validate_spacing(mask.geometry.spacing);
  validate_spacing(target_spacing);
  return {resample_grid(mask.labels, mask.geometry.spacing, target_spacing, Interpolation::Nearest),
          mask.scheme,
          {target_spacing, mask.geometry.origin}};
}

std::array<std::int64_t, 3> roi_center(const LabelMask& gland) {
  std::array<double, 3> sum{0.0, 0.0, 0.0};
  std::size_t count = 0;
  const Dims& d = gland.dims();
  for (std::int64_t z = 0; z < d.z; ++z) {
    for (std::int64_t y = 0; y < d.y; ++y) {
      for (std::int64_t x = 0; x < d.x; ++x) {
        if (gland.labels(x, y, z) == 0) continue;
        sum[0] += static_cast<double>(x);
        sum[1] += static_cast<double>(y);
        sum[2] += static_cast<double>(z);
        ++count;
      }
    }
  }
  require(count > 0, ErrorCode::NoRoi, "no ROI: gland mask is empty");
  std::array<std::int64_t, 3> c{};
  for (std::size_t a = 0; a < 3; ++a) {
    c[a] = static_cast<std::int64_t>(std::round(sum[a] / static_cast<double>(count)));
  }
  return c;
}

std::array<std::int64_t, 3> crop_origin(const std::array<std::int64_t, 3>& center, const Dims& size) {
  return {center[0] - size.x / 2, center[1] - size.y / 2, center[2] - size.z / 2};
}

namespace {

void require_shared_geometry(const Dims& a, const Geometry& ga, const Dims& b, const Geometry& gb) {
  require(a == b && same_geometry(ga, gb), ErrorCode::GeometryMismatch,
          "volume and mask do not share geometry");
}

Geometry window_geometry(const Geometry& g, const std::array<std::int64_t, 3>& start) {
  Geometry out = g;
  for (std::size_t a = 0; a < 3; ++a) out.origin[a] += static_cast<double>(start[a]) * g.spacing[a];
  return out;
}

}  // namespace

PatchStack crop_to_roi(const Volume3D& vol, const LabelMask& gland, const PatchSpec& spec) {
  require_shared_geometry(vol.dims(), vol.geometry, gland.dims(), gland.geometry);
  const auto start = crop_origin(roi_center(gland), spec.size);
  PatchStack out;
  out.channels.push_back(crop_window(vol.data, start, spec.size));
  out.roles.push_back(ChannelRole::Image);
  out.geometry = window_geometry(vol.geometry, start);
  return out;
}

LabelMask crop_mask_to_roi(const LabelMask& mask, const LabelMask& gland, const PatchSpec& spec) {
  require_shared_geometry(mask.dims(), mask.geometry, gland.dims(), gland.geometry);
  const auto start = crop_origin(roi_center(gland), spec.size);
  return {crop_window(mask.labels, start, spec.size), mask.scheme, window_geometry(mask.geometry, start)};
}

double percentile(std::vector<double> values, double q) {
  require(!values.empty(), ErrorCode::InvalidArgument, "percentile of empty data");
  require(q >= 0.0 && q <= 100.0, ErrorCode::InvalidArgument, "percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

NormalizeResult normalize(const PatchStack& patch, NormalizeMethod method) {
  patch.validate();
  NormalizeResult result{patch, {}, {}};
  for (std::size_t c = 0; c < patch.channels.size(); ++c) {
    if (patch.roles[c] != ChannelRole::Image) continue;
    auto& ch = result.patch.channels[c];
    for (double v : ch.values()) {
      require(std::isfinite(v), ErrorCode::NonFinite, "image channel contains non-finite values");
    }
    double offset = 0.0, scale = 0.0;
    bool degenerate = false;
    if (method == NormalizeMethod::PercentileMinMax) {
      const double lo = percentile(ch.storage(), kLowerPercentile);
      const double hi = percentile(ch.storage(), kUpperPercentile);
      degenerate = !(hi > lo);
      offset = lo;
      scale = degenerate ? 0.0 : 1.0 / (hi - lo);
    } else {
      const auto n = static_cast<double>(ch.size());
      const double mean = std::accumulate(ch.values().begin(), ch.values().end(), 0.0) / n;
      double var = 0.0;
      for (double v : ch.values()) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / n);
      degenerate = !(sd > 0.0);
      offset = mean;
      scale = degenerate ? 0.0 : 1.0 / sd;
    }
    if (degenerate) {
      std::fill(ch.storage().begin(), ch.storage().end(), 0.0);
      result.degenerate_channels.push_back(c);
      result.warnings.push_back("channel " + std::to_string(c) + " is degenerate; emitted zeros");
      continue;
    }
    for (auto& v : ch.values()) {
      v = (v - offset) * scale;
      if (method == NormalizeMethod::PercentileMinMax) v = std::clamp(v, 0.0, 1.0);
    }
  }
  return result;
}

PatchStack assemble_channels(const PatchStack& image, const std::optional<LabelMask>& prior, ChannelMode mode) {
  image.validate();
  auto it = std::find(image.roles.begin(), image.roles.end(), ChannelRole::Image);
  require(it != image.roles.end(), ErrorCode::InvalidArgument, "patch has no image channel");
  const ScalarGrid& img = image.channels[static_cast<std::size_t>(it - image.roles.begin())];

  PatchStack out;
  out.geometry = image.geometry;
  if (mode == ChannelMode::ImageOnly) {
    out.channels = {img};
    out.roles = {ChannelRole::Image};
    return out;
  }
  require(prior.has_value(), ErrorCode::InvalidArgument, "dup_plus_prior requires a prior mask");
  require(prior->dims() == img.dims(), ErrorCode::GeometryMismatch,
          "prior shape does not match the image patch");
  require(same_geometry({prior->geometry.spacing, {}}, {image.geometry.spacing, {}}), ErrorCode::GeometryMismatch,
          "prior spacing does not match the image patch");
  ScalarGrid p(img.dims());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = prior->labels[i] != 0 ? 1.0 : 0.0;
  out.channels = {img, img, std::move(p)};
  out.roles = {ChannelRole::Image, ChannelRole::Image, ChannelRole::Prior};
  return out;
}

}  // namespace vbiopsy::imaging
