#pragma once

// Second-order forward-mode differentiation over a fixed number of inputs.
// A Jet carries a value together with its exact gradient and Hessian, so
// small scalar expressions (KL divergences, flux moments, covariance
// entries) can be differentiated twice without hand-expanding every term.

#include <Eigen/Dense>

#include <cmath>

namespace skycat {

template <int N>
struct Jet {
  using Vec = Eigen::Matrix<double, N, 1>;
  using Mat = Eigen::Matrix<double, N, N>;

  double v = 0.0;
  Vec g = Vec::Zero();
  Mat h = Mat::Zero();

  Jet() = default;
  explicit Jet(double value) : v(value) {}

  /// Independent variable number `index` with the given value.
  static Jet variable(double value, int index) {
    Jet j(value);
    j.g(index) = 1.0;
    return j;
  }
};

namespace jet_detail {

/// Applies a scalar function with derivatives d1, d2 to a jet.
template <int N>
Jet<N> chain(const Jet<N>& a, double f, double d1, double d2) {
  Jet<N> r(f);
  r.g = d1 * a.g;
  r.h = d1 * a.h + d2 * (a.g * a.g.transpose());
  return r;
}

}  // namespace jet_detail

template <int N>
Jet<N> operator+(const Jet<N>& a, const Jet<N>& b) {
  Jet<N> r(a.v + b.v);
  r.g = a.g + b.g;
  r.h = a.h + b.h;
  return r;
}

template <int N>
Jet<N> operator-(const Jet<N>& a, const Jet<N>& b) {
  Jet<N> r(a.v - b.v);
  r.g = a.g - b.g;
  r.h = a.h - b.h;
  return r;
}

template <int N>
Jet<N> operator-(const Jet<N>& a) {
  Jet<N> r(-a.v);
  r.g = -a.g;
  r.h = -a.h;
  return r;
}

template <int N>
Jet<N> operator*(const Jet<N>& a, const Jet<N>& b) {
  Jet<N> r(a.v * b.v);
  r.g = a.v * b.g + b.v * a.g;
  const typename Jet<N>::Mat cross = a.g * b.g.transpose();
  r.h = a.v * b.h + b.v * a.h + cross + cross.transpose();
  return r;
}

template <int N>
Jet<N> operator/(const Jet<N>& a, const Jet<N>& b) {
  const double inv = 1.0 / b.v;
  return a * jet_detail::chain(b, inv, -inv * inv, 2.0 * inv * inv * inv);
}

template <int N>
Jet<N> operator+(const Jet<N>& a, double c) {
  Jet<N> r = a;
  r.v += c;
  return r;
}
template <int N>
Jet<N> operator+(double c, const Jet<N>& a) {
  return a + c;
}
template <int N>
Jet<N> operator-(const Jet<N>& a, double c) {
  return a + (-c);
}
template <int N>
Jet<N> operator-(double c, const Jet<N>& a) {
  return (-a) + c;
}
template <int N>
Jet<N> operator*(const Jet<N>& a, double c) {
  Jet<N> r(a.v * c);
  r.g = a.g * c;
  r.h = a.h * c;
  return r;
}
template <int N>
Jet<N> operator*(double c, const Jet<N>& a) {
  return a * c;
}
template <int N>
Jet<N> operator/(const Jet<N>& a, double c) {
  return a * (1.0 / c);
}

template <int N>
Jet<N> exp(const Jet<N>& a) {
  const double e = std::exp(a.v);
  return jet_detail::chain(a, e, e, e);
}

template <int N>
Jet<N> expm1(const Jet<N>& a) {
  const double e = std::exp(a.v);
  return jet_detail::chain(a, std::expm1(a.v), e, e);
}

template <int N>
Jet<N> log(const Jet<N>& a) {
  const double inv = 1.0 / a.v;
  return jet_detail::chain(a, std::log(a.v), inv, -inv * inv);
}

template <int N>
Jet<N> sin(const Jet<N>& a) {
  const double s = std::sin(a.v);
  return jet_detail::chain(a, s, std::cos(a.v), -s);
}

template <int N>
Jet<N> cos(const Jet<N>& a) {
  const double c = std::cos(a.v);
  return jet_detail::chain(a, c, -std::sin(a.v), -c);
}

template <int N>
Jet<N> square(const Jet<N>& a) {
  return jet_detail::chain(a, a.v * a.v, 2.0 * a.v, 2.0);
}

/// log(1 + exp(x)), stable for large |x|.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <int N>
Jet<N> sigmoid(const Jet<N>& a) {
  const double s = sigmoid(a.v);
  const double d1 = s * (1.0 - s);
  return jet_detail::chain(a, s, d1, d1 * (1.0 - 2.0 * s));
}

/// log(sigmoid(x)) = -softplus(-x).
template <int N>
Jet<N> log_sigmoid(const Jet<N>& a) {
  const double s = sigmoid(a.v);
  return jet_detail::chain(a, -softplus(-a.v), 1.0 - s, -s * (1.0 - s));
}

}  // namespace skycat

namespace skycat {

inline double log_sigmoid(double x) { return -softplus(-x); }
inline double square(double x) { return x * x; }

}  // namespace skycat
