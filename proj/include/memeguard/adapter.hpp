#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace memeguard::adapter {

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

/// Residual bottleneck adapter: out = up * relu(down * z + b_down) + b_up + z.
/// `down` is r x d (applied first), `up` is d x r.
struct AdapterParams {
  Matrix down;
  std::vector<double> b_down;
  Matrix up;
  std::vector<double> b_up;

  std::size_t width() const { return down.cols; }
  std::size_t bottleneck() const { return down.rows; }

  static AdapterParams zeros(std::size_t d, std::size_t r) {
    return {Matrix(r, d), std::vector<double>(r, 0.0), Matrix(d, r), std::vector<double>(d, 0.0)};
  }

  /// Entries uniform in [-scale, scale] from a seeded engine (platform independent).
  static AdapterParams random(std::size_t d, std::size_t r, std::uint64_t seed, double scale = 0.5) {
    std::mt19937_64 rng(seed);
    auto draw = [&] { return scale * (2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0); };
    AdapterParams p = zeros(d, r);
    for (double& x : p.down.data) x = draw();
    for (double& x : p.b_down) x = draw();
    for (double& x : p.up.data) x = draw();
    for (double& x : p.b_up) x = draw();
    return p;
  }

  void validate() const {
    const std::size_t d = width(), r = bottleneck();
    if (d == 0 || r == 0) throw std::invalid_argument("adapter: d and r must be positive");
    if (r >= d) throw std::invalid_argument("adapter: bottleneck r must be smaller than width d");
    if (b_down.size() != r || up.rows != d || up.cols != r || b_up.size() != d ||
        down.data.size() != r * d || up.data.size() != d * r)
      throw std::invalid_argument("adapter: parameter shapes are inconsistent");
    auto finite = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    if (!finite(down.data) || !finite(b_down) || !finite(up.data) || !finite(b_up))
      throw std::invalid_argument("adapter: non-finite parameter");
  }
};

namespace detail {

inline void check_input(std::span<const double> z, const AdapterParams& p) {
  p.validate();
  if (z.size() != p.width())
    throw std::invalid_argument("adapter: input has length " + std::to_string(z.size()) + ", expected " +
                                std::to_string(p.width()));
  if (!std::all_of(z.begin(), z.end(), [](double x) { return std::isfinite(x); }))
    throw std::invalid_argument("adapter: non-finite input");
}

inline std::vector<double> pre_activation(std::span<const double> z, const AdapterParams& p) {
  std::vector<double> h(p.bottleneck());
  for (std::size_t k = 0; k < h.size(); ++k) {
    double acc = p.b_down[k];
    for (std::size_t j = 0; j < z.size(); ++j) acc += p.down(k, j) * z[j];
    h[k] = acc;
  }
  return h;
}

}  // namespace detail

inline std::vector<double> forward(std::span<const double> z, const AdapterParams& p) {
  detail::check_input(z, p);
  std::vector<double> a = detail::pre_activation(z, p);
  for (double& x : a) x = std::max(x, 0.0);
  std::vector<double> out(z.begin(), z.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = p.b_up[i];
    for (std::size_t k = 0; k < a.size(); ++k) acc += p.up(i, k) * a[k];
    out[i] += acc;
  }
  return out;
}

/// Active units of the bottleneck for input z (pre-activation > 0).
inline std::vector<bool> relu_mask(std::span<const double> z, const AdapterParams& p) {
  detail::check_input(z, p);
  const auto h = detail::pre_activation(z, p);
  std::vector<bool> mask(h.size());
  for (std::size_t k = 0; k < h.size(); ++k) mask[k] = h[k] > 0.0;
  return mask;
}

/// Gradient of probe . forward(z) with respect to every parameter and the input.
struct Gradients {
  Matrix down;
  std::vector<double> b_down;
  Matrix up;
  std::vector<double> b_up;
  std::vector<double> z;
};

/// Reverse-mode gradient; relu'(0) taken as 0.
inline Gradients backward(std::span<const double> z, const AdapterParams& p, std::span<const double> probe) {
  detail::check_input(z, p);
  const std::size_t d = p.width(), r = p.bottleneck();
  if (probe.size() != d) throw std::invalid_argument("adapter: probe length mismatch");
  const auto h = detail::pre_activation(z, p);
  Gradients g{Matrix(r, d), std::vector<double>(r, 0.0), Matrix(d, r), std::vector<double>(probe.begin(), probe.end()),
              std::vector<double>(probe.begin(), probe.end())};
  std::vector<double> grad_h(r, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < r; ++k) {
      g.up(i, k) = probe[i] * std::max(h[k], 0.0);
      grad_h[k] += p.up(i, k) * probe[i];
    }
  for (std::size_t k = 0; k < r; ++k) {
    if (h[k] <= 0.0) grad_h[k] = 0.0;
    g.b_down[k] = grad_h[k];
    for (std::size_t j = 0; j < d; ++j) {
      g.down(k, j) = grad_h[k] * z[j];
      g.z[j] += grad_h[k] * p.down(k, j);
    }
  }
  return g;
}

using GradientFn = std::function<Gradients(std::span<const double>, const AdapterParams&, std::span<const double>)>;

/// Builds the full Jacobian of forward() from `analytic` (one reverse pass per output basis vector)
/// and compares every entry with a central finite difference of step eps. Returns the largest
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-4).
inline double grad_check(const AdapterParams& p, std::span<const double> z, double eps,
                         const GradientFn& analytic = backward) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("adapter: eps must be in [1e-7, 1e-3]");
  detail::check_input(z, p);
  const std::size_t d = p.width();

  // Flatten (params, z) so each coordinate can be perturbed uniformly.
  auto flatten = [](const Matrix& down, const std::vector<double>& bd, const Matrix& up, const std::vector<double>& bu,
                    const std::vector<double>& zz) {
    std::vector<double> v;
    v.insert(v.end(), down.data.begin(), down.data.end());
    v.insert(v.end(), bd.begin(), bd.end());
    v.insert(v.end(), up.data.begin(), up.data.end());
    v.insert(v.end(), bu.begin(), bu.end());
    v.insert(v.end(), zz.begin(), zz.end());
    return v;
  };
  const std::vector<double> z_vec(z.begin(), z.end());
  const std::vector<double> theta = flatten(p.down, p.b_down, p.up, p.b_up, z_vec);
  auto evaluate = [&](const std::vector<double>& t) {
    AdapterParams q = p;
    std::size_t o = 0;
    for (double& x : q.down.data) x = t[o++];
    for (double& x : q.b_down) x = t[o++];
    for (double& x : q.up.data) x = t[o++];
    for (double& x : q.b_up) x = t[o++];
    std::vector<double> zz(d);
    for (double& x : zz) x = t[o++];
    return forward(zz, q);
  };

  std::vector<std::vector<double>> jac_rows(d);
  for (std::size_t i = 0; i < d; ++i) {
    std::vector<double> probe(d, 0.0);
    probe[i] = 1.0;
    const Gradients g = analytic(z, p, probe);
    jac_rows[i] = flatten(g.down, g.b_down, g.up, g.b_up, g.z);
    if (jac_rows[i].size() != theta.size()) throw std::invalid_argument("adapter: analytic gradient has wrong shape");
  }

  double worst = 0.0;
  std::vector<double> t = theta;
  for (std::size_t c = 0; c < theta.size(); ++c) {
    t[c] = theta[c] + eps;
    const auto plus = evaluate(t);
    t[c] = theta[c] - eps;
    const auto minus = evaluate(t);
    t[c] = theta[c];
    for (std::size_t i = 0; i < d; ++i) {
      const double numeric = (plus[i] - minus[i]) / (2.0 * eps);
      const double a = jac_rows[i][c];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-4});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace memeguard::adapter
