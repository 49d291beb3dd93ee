#pragma once

// Reference implementations written independently of the library, used as
// test oracles: plain loops, std::tanh, central differences.

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mfldiv/features.hpp"

namespace oracle {

inline double activation(mfldiv::Activation act, double u) {
  switch (act) {
    case mfldiv::Activation::kTanh:
      return std::tanh(u);
    case mfldiv::Activation::kSigmoid:
      return 1.0 / (1.0 + std::exp(-u));
    case mfldiv::Activation::kLinear:
      return u;
  }
  return 0.0;
}

inline double neuron(const mfldiv::NeuronSpec& spec, const std::vector<double>& x,
                     const std::vector<double>& a) {
  const double r = spec.clip_bound;
  double pre = 0.0;
  for (int k = 0; k < spec.input_dim; ++k) pre += x[k] * a[k];
  if (spec.activation == mfldiv::Activation::kLinear) return r * std::tanh(pre / r);
  pre += x[spec.input_dim];
  return r * std::tanh(x[spec.input_dim + 1] * activation(spec.activation, pre) / r);
}

inline double ensemble(const mfldiv::ParticleEnsemble& ens, const std::vector<double>& a) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < ens.size(); ++i) {
    const auto p = ens.particle(i);
    sum += neuron(ens.spec(), std::vector<double>(p.begin(), p.end()), a);
  }
  return sum / static_cast<double>(ens.size());
}

// Central differences of f at x with step h.
inline Eigen::VectorXd central_diff(const std::function<double(const Eigen::VectorXd&)>& f,
                                    const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    Eigen::VectorXd xp = x, xm = x;
    xp[k] += h;
    xm[k] -= h;
    g[k] = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

// Relative error with an absolute floor so near-zero gradients do not blow up.
inline double rel_err(const Eigen::VectorXd& got, const Eigen::VectorXd& want, double floor = 1e-6) {
  return (got - want).norm() / std::max({want.norm(), got.norm(), floor});
}

inline mfldiv::RowMatrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& gen,
                                         double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  mfldiv::RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = nd(gen);
  }
  return m;
}

inline mfldiv::RowMatrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& gen,
                                        double lo, double hi) {
  std::uniform_real_distribution<double> ud(lo, hi);
  mfldiv::RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = ud(gen);
  }
  return m;
}

inline std::vector<double> row(const mfldiv::RowMatrix& m, Eigen::Index i) {
  return std::vector<double>(m.row(i).data(), m.row(i).data() + m.cols());
}

}  // namespace oracle
