#include "vbiopsy/imaging/augment.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <random>

namespace vbiopsy::imaging {
namespace {

constexpr Matrix3 kIdentity{{{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}}};

Matrix3 multiply(const Matrix3& a, const Matrix3& b) {
  Matrix3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

Matrix3 inverse(const Matrix3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  require(std::abs(det) > 1e-12, ErrorCode::InvalidArgument, "spatial transform is singular");
  Matrix3 r{};
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return r;
}

void check_prob(double p, const char* name) {
  require(p >= 0.0 && p <= 1.0, ErrorCode::InvalidArgument, std::string(name) + " probability outside [0,1]");
}

void check_range(const Range& r, const char* name) {
  require(std::isfinite(r.min) && std::isfinite(r.max) && r.min <= r.max, ErrorCode::InvalidArgument,
          std::string(name) + " range must satisfy min <= max");
}

double trilinear(const ScalarGrid& g, double x, double y, double z) {
  const auto x0 = static_cast<std::int64_t>(std::floor(x));
  const auto y0 = static_cast<std::int64_t>(std::floor(y));
  const auto z0 = static_cast<std::int64_t>(std::floor(z));
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0), fz = z - static_cast<double>(z0);
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
        if (w == 0.0) continue;
        const std::int64_t xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
        if (g.contains(xi, yi, zi)) acc += w * g(xi, yi, zi);
      }
    }
  }
  return acc;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (auto& v : k) v /= sum;
  return k;
}

ScalarGrid smooth_axis(const ScalarGrid& in, std::size_t axis, double sigma) {
  const auto kernel = gaussian_kernel(sigma);
  const auto radius = static_cast<std::int64_t>(kernel.size() / 2);
  const Dims& d = in.dims();
  ScalarGrid out(d);
  const std::int64_t n = d[axis];
  for (std::int64_t z = 0; z < d.z; ++z) {
    for (std::int64_t y = 0; y < d.y; ++y) {
      for (std::int64_t x = 0; x < d.x; ++x) {
        std::array<std::int64_t, 3> p{x, y, z};
        const std::int64_t centre = p[axis];
        double acc = 0.0;
        for (std::int64_t k = -radius; k <= radius; ++k) {
          p[axis] = std::clamp<std::int64_t>(centre + k, 0, n - 1);
          acc += kernel[static_cast<std::size_t>(k + radius)] * in(p[0], p[1], p[2]);
        }
        out(x, y, z) = acc;
      }
    }
  }
  return out;
}

double legendre(int degree, double t) {
  switch (degree) {
    case 0: return 1.0;
    case 1: return t;
    case 2: return 0.5 * (3.0 * t * t - 1.0);
    case 3: return 0.5 * (5.0 * t * t * t - 3.0 * t);
    default: {
      double p0 = 1.0, p1 = t;
      for (int n = 1; n < degree; ++n) {
        const double p2 = ((2.0 * n + 1.0) * t * p1 - n * p0) / (n + 1.0);
        p0 = p1;
        p1 = p2;
      }
      return p1;
    }
  }
}

double normalized_coord(std::int64_t i, std::int64_t n) {
  return n <= 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
}

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

ScalarGrid gibbs(const ScalarGrid& in, double alpha) {
  const Dims& d = in.dims();
  const auto n = in.size();
  auto* buf = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
  fftw_plan fwd, inv;
  {
    std::lock_guard lock(fftw_planner_mutex());
    fwd = fftw_plan_dft_3d(static_cast<int>(d.z), static_cast<int>(d.y), static_cast<int>(d.x), buf, buf,
                           FFTW_FORWARD, FFTW_ESTIMATE);
    inv = fftw_plan_dft_3d(static_cast<int>(d.z), static_cast<int>(d.y), static_cast<int>(d.x), buf, buf,
                           FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  for (std::size_t i = 0; i < n; ++i) {
    buf[i][0] = in[i];
    buf[i][1] = 0.0;
  }
  fftw_execute(fwd);
  // Keep a ball of normalized radius (1 - alpha) around DC; truncation rings.
  const double keep = 1.0 - alpha;
  auto freq = [](std::int64_t i, std::int64_t len) {
    const std::int64_t f = i <= len / 2 ? i : i - len;
    return len <= 1 ? 0.0 : static_cast<double>(f) / (static_cast<double>(len) / 2.0);
  };
  for (std::int64_t z = 0; z < d.z; ++z) {
    for (std::int64_t y = 0; y < d.y; ++y) {
      for (std::int64_t x = 0; x < d.x; ++x) {
        const double fx = freq(x, d.x), fy = freq(y, d.y), fz = freq(z, d.z);
        if (std::sqrt(fx * fx + fy * fy + fz * fz) > keep) {
          const auto i = in.index(x, y, z);
          buf[i][0] = 0.0;
          buf[i][1] = 0.0;
        }
      }
    }
  }
  fftw_execute(inv);
  ScalarGrid out(d);
  for (std::size_t i = 0; i < n; ++i) out[i] = buf[i][0] / static_cast<double>(n);
  {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(inv);
  }
  fftw_free(buf);
  return out;
}

}  // namespace

AugmentationConfig AugmentationConfig::disabled() {
  AugmentationConfig cfg;
  cfg.zoom_prob = cfg.affine_prob = cfg.flip_prob = 0.0;
  cfg.noise_prob = cfg.smooth_prob = cfg.scale_intensity_prob = 0.0;
  cfg.contrast_prob = cfg.bias_field_prob = cfg.gibbs_prob = 0.0;
  return cfg;
}

void AugmentationConfig::validate() const {
  check_prob(zoom_prob, "zoom");
  check_prob(affine_prob, "affine");
  check_prob(flip_prob, "flip");
  check_prob(noise_prob, "gaussian noise");
  check_prob(smooth_prob, "gaussian smoothing");
  check_prob(scale_intensity_prob, "intensity scaling");
  check_prob(contrast_prob, "contrast");
  check_prob(bias_field_prob, "bias field");
  check_prob(gibbs_prob, "gibbs");
  check_range(zoom, "zoom");
  require(zoom.min > 0.0, ErrorCode::InvalidArgument, "zoom factors must be > 0");
  require(rotate_z >= 0.0, ErrorCode::InvalidArgument, "rotation range must be >= 0");
  for (double s : shear) require(s >= 0.0, ErrorCode::InvalidArgument, "shear range must be >= 0");
  for (double s : scale) require(s >= 0.0 && s < 1.0, ErrorCode::InvalidArgument, "scale range must lie in [0,1)");
  for (int a : flip_axes) require(a >= 0 && a <= 2, ErrorCode::InvalidArgument, "flip axis must be 0, 1 or 2");
  require(noise_std >= 0.0, ErrorCode::InvalidArgument, "noise std must be >= 0");
  for (const auto& r : smooth_sigma) {
    check_range(r, "smoothing sigma");
    require(r.min > 0.0, ErrorCode::InvalidArgument, "smoothing sigma must be > 0");
  }
  check_range(scale_factor, "intensity scale");
  check_range(gamma, "gamma");
  require(gamma.min > 0.0, ErrorCode::InvalidArgument, "gamma must be > 0");
  check_range(bias_coeff, "bias coefficient");
  require(bias_degree >= 0, ErrorCode::InvalidArgument, "bias degree must be >= 0");
  check_range(gibbs_alpha, "gibbs alpha");
  require(gibbs_alpha.min >= 0.0 && gibbs_alpha.max <= 1.0, ErrorCode::InvalidArgument, "gibbs alpha must lie in [0,1]");
}

std::string_view to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::Zoom: return "zoom";
    case TransformKind::Affine: return "affine";
    case TransformKind::Flip: return "flip";
    case TransformKind::GaussianNoise: return "gaussian_noise";
    case TransformKind::GaussianSmooth: return "gaussian_smooth";
    case TransformKind::ScaleIntensity: return "scale_intensity";
    case TransformKind::Contrast: return "contrast";
    case TransformKind::BiasField: return "bias_field";
    case TransformKind::Gibbs: return "gibbs";
  }
  return "unknown";
}

bool is_spatial(TransformKind kind) {
  return kind == TransformKind::Zoom || kind == TransformKind::Affine || kind == TransformKind::Flip;
}

ScalarGrid apply_spatial(const ScalarGrid& grid, const Matrix3& forward, const Vec3& spacing, bool nearest) {
  const Matrix3 inv = inverse(forward);
  const Dims& d = grid.dims();
  const Vec3 centre{(static_cast<double>(d.x) - 1.0) / 2.0, (static_cast<double>(d.y) - 1.0) / 2.0,
                    (static_cast<double>(d.z) - 1.0) / 2.0};
  ScalarGrid out(d);
  for (std::int64_t z = 0; z < d.z; ++z) {
    for (std::int64_t y = 0; y < d.y; ++y) {
      for (std::int64_t x = 0; x < d.x; ++x) {
        const Vec3 phys{(static_cast<double>(x) - centre[0]) * spacing[0],
                        (static_cast<double>(y) - centre[1]) * spacing[1],
                        (static_cast<double>(z) - centre[2]) * spacing[2]};
        Vec3 src{};
        for (int i = 0; i < 3; ++i) {
          const double v = inv[i][0] * phys[0] + inv[i][1] * phys[1] + inv[i][2] * phys[2];
          src[i] = centre[i] + v / spacing[i];
        }
        if (nearest) {
          const auto xi = static_cast<std::int64_t>(std::floor(src[0] + 0.5));
          const auto yi = static_cast<std::int64_t>(std::floor(src[1] + 0.5));
          const auto zi = static_cast<std::int64_t>(std::floor(src[2] + 0.5));
          out(x, y, z) = grid.contains(xi, yi, zi) ? grid(xi, yi, zi) : 0.0;
        } else {
          out(x, y, z) = trilinear(grid, src[0], src[1], src[2]);
        }
      }
    }
  }
  return out;
}

AugmentationResult augment_traced(const PatchStack& patch, const AugmentationConfig& cfg) {
  patch.validate();
  cfg.validate();
  std::mt19937_64 rng(cfg.rng_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto fires = [&](double p) { return p > 0.0 && unit(rng) < p; };
  auto draw = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  AugmentationResult result{patch, {}};
  auto& channels = result.patch.channels;
  const auto& roles = result.patch.roles;
  const Vec3& spacing = patch.geometry.spacing;

  auto apply_to_all = [&](const FiredTransform& t) {
    for (std::size_t c = 0; c < channels.size(); ++c) {
      channels[c] = apply_spatial(channels[c], t.matrix, spacing, roles[c] == ChannelRole::Prior);
    }
    result.fired.push_back(t);
  };
  auto for_images = [&](auto&& fn) {
    for (std::size_t c = 0; c < channels.size(); ++c) {
      if (roles[c] == ChannelRole::Image) fn(channels[c]);
    }
  };

  if (fires(cfg.zoom_prob)) {
    const double f = draw(cfg.zoom.min, cfg.zoom.max);
    FiredTransform t{TransformKind::Zoom, {f}, {{{f, 0.0, 0.0}, {0.0, f, 0.0}, {0.0, 0.0, f}}}};
    apply_to_all(t);
  }
  if (fires(cfg.affine_prob)) {
    const double angle = draw(-cfg.rotate_z, cfg.rotate_z);
    std::array<double, 3> sh{}, sc{};
    for (int i = 0; i < 3; ++i) sh[i] = draw(-cfg.shear[i], cfg.shear[i]);
    for (int i = 0; i < 3; ++i) sc[i] = 1.0 + draw(-cfg.scale[i], cfg.scale[i]);
    const double c = std::cos(angle), s = std::sin(angle);
    const Matrix3 rot{{{c, -s, 0.0}, {s, c, 0.0}, {0.0, 0.0, 1.0}}};
    const Matrix3 shear{{{1.0, sh[0], sh[1]}, {0.0, 1.0, sh[2]}, {0.0, 0.0, 1.0}}};
    const Matrix3 scale{{{sc[0], 0.0, 0.0}, {0.0, sc[1], 0.0}, {0.0, 0.0, sc[2]}}};
    FiredTransform t{TransformKind::Affine, {angle, sh[0], sh[1], sh[2], sc[0], sc[1], sc[2]},
                     multiply(rot, multiply(shear, scale))};
    apply_to_all(t);
  }
  if (fires(cfg.flip_prob) && !cfg.flip_axes.empty()) {
    Matrix3 m = kIdentity;
    std::vector<double> axes;
    for (int a : cfg.flip_axes) {
      m[a][a] = -m[a][a];
      axes.push_back(a);
    }
    apply_to_all(FiredTransform{TransformKind::Flip, axes, m});
  }

  if (fires(cfg.noise_prob)) {
    const double sd = draw(0.0, cfg.noise_std);
    std::normal_distribution<double> noise(0.0, 1.0);
    for_images([&](ScalarGrid& g) {
      for (auto& v : g.values()) v += cfg.noise_mean + sd * noise(rng);
    });
    result.fired.push_back({TransformKind::GaussianNoise, {cfg.noise_mean, sd}, {}});
  }
  if (fires(cfg.smooth_prob)) {
    std::array<double, 3> sig{};
    for (int a = 0; a < 3; ++a) sig[a] = draw(cfg.smooth_sigma[a].min, cfg.smooth_sigma[a].max);
    for_images([&](ScalarGrid& g) {
      for (std::size_t a = 0; a < 3; ++a) g = smooth_axis(g, a, sig[a]);
    });
    result.fired.push_back({TransformKind::GaussianSmooth, {sig[0], sig[1], sig[2]}, {}});
  }
  if (fires(cfg.scale_intensity_prob)) {
    const double f = draw(cfg.scale_factor.min, cfg.scale_factor.max);
    for_images([&](ScalarGrid& g) {
      for (auto& v : g.values()) v *= f;
    });
    result.fired.push_back({TransformKind::ScaleIntensity, {f}, {}});
  }
  if (fires(cfg.contrast_prob)) {
    const double gamma = draw(cfg.gamma.min, cfg.gamma.max);
    for_images([&](ScalarGrid& g) {
      const auto [mn, mx] = std::minmax_element(g.values().begin(), g.values().end());
      const double lo = *mn, range = *mx - *mn;
      for (auto& v : g.values()) v = std::pow((v - lo) / (range + 1e-7), gamma) * range + lo;
    });
    result.fired.push_back({TransformKind::Contrast, {gamma}, {}});
  }
  if (fires(cfg.bias_field_prob)) {
    std::vector<std::array<int, 3>> terms;
    for (int i = 0; i <= cfg.bias_degree; ++i)
      for (int j = 0; j <= cfg.bias_degree - i; ++j)
        for (int k = 0; k <= cfg.bias_degree - i - j; ++k) terms.push_back({i, j, k});
    std::vector<double> coeff(terms.size());
    for (auto& c : coeff) c = draw(cfg.bias_coeff.min, cfg.bias_coeff.max);
    const Dims d = result.patch.dims();
    ScalarGrid field(d);
    for (std::int64_t z = 0; z < d.z; ++z) {
      for (std::int64_t y = 0; y < d.y; ++y) {
        for (std::int64_t x = 0; x < d.x; ++x) {
          const double tx = normalized_coord(x, d.x), ty = normalized_coord(y, d.y), tz = normalized_coord(z, d.z);
          double s = 0.0;
          for (std::size_t t = 0; t < terms.size(); ++t) {
            s += coeff[t] * legendre(terms[t][0], tx) * legendre(terms[t][1], ty) * legendre(terms[t][2], tz);
          }
          field(x, y, z) = std::exp(s);
        }
      }
    }
    for_images([&](ScalarGrid& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= field[i];
    });
    result.fired.push_back({TransformKind::BiasField, coeff, {}});
  }
  if (fires(cfg.gibbs_prob)) {
    const double alpha = draw(cfg.gibbs_alpha.min, cfg.gibbs_alpha.max);
    for_images([&](ScalarGrid& g) { g = gibbs(g, alpha); });
    result.fired.push_back({TransformKind::Gibbs, {alpha}, {}});
  }
  return result;
}

PatchStack augment(const PatchStack& patch, const AugmentationConfig& cfg) {
  return augment_traced(patch, cfg).patch;
}

}  // namespace vbiopsy::imaging
