#pragma once

// Parameter containers, the Adam update, a small MLP builder, and the
// central-finite-difference gradient check used as the training oracle.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "genloop/common.hpp"
#include "genloop/tape.hpp"

namespace genloop::nn {

template <class T>
struct ParamSetT {
  struct Entry {
    std::string name;
    MatX<T> value;
    MatX<T> m, v;  // Adam moments, shape-matched to value
  };

  std::vector<Entry> entries;  // insertion order fixes iteration order
  std::unordered_map<std::string, int> index;
  long long step = 0;

  MatX<T>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index.count(name)) throw ConfigError("duplicate parameter: " + name);
    Entry e;
    e.name = name;
    e.value = MatX<T>::Zero(rows, cols);
    e.m = MatX<T>::Zero(rows, cols);
    e.v = MatX<T>::Zero(rows, cols);
    index.emplace(name, static_cast<int>(entries.size()));
    entries.push_back(std::move(e));
    return entries.back().value;
  }

  bool has(const std::string& name) const { return index.count(name) > 0; }

  MatX<T>& operator[](const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("unknown parameter: " + name);
    return entries[it->second].value;
  }
  const MatX<T>& operator[](const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("unknown parameter: " + name);
    return entries[it->second].value;
  }

  size_t count_scalars() const {
    size_t n = 0;
    for (const auto& e : entries) n += static_cast<size_t>(e.value.size());
    return n;
  }

  template <class U>
  ParamSetT<U> cast() const {
    ParamSetT<U> out;
    out.step = step;
    for (const auto& e : entries) {
      out.add(e.name, e.value.rows(), e.value.cols()) =
          e.value.template cast<U>();
      out.entries.back().m = e.m.template cast<U>();
      out.entries.back().v = e.v.template cast<U>();
    }
    return out;
  }
};

using ParamSet = ParamSetT<float>;

template <class T>
using GradMap = std::map<std::string, MatX<T>>;

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam step. Parameters without a gradient entry keep
// their moments untouched; the shared step counter still advances.
template <class T>
void adam_step(ParamSetT<T>& params, const GradMap<T>& grads, const AdamConfig& cfg) {
  params.step += 1;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T corr1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(params.step)));
  const T corr2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(params.step)));
  for (auto& e : params.entries) {
    auto it = grads.find(e.name);
    if (it == grads.end()) continue;
    const MatX<T>& g = it->second;
    if (g.rows() != e.value.rows() || g.cols() != e.value.cols())
      throw TrainError("adam_step: gradient shape mismatch for " + e.name);
    if (!g.allFinite())
      throw TrainError("adam_step: non-finite gradient for " + e.name);
    e.m = b1 * e.m + (T(1) - b1) * g;
    e.v.array() = b2 * e.v.array() + (T(1) - b2) * g.array().square();
    e.value.array() -= static_cast<T>(cfg.lr) * (e.m.array() / corr1) /
                       ((e.v.array() / corr2).sqrt() + static_cast<T>(cfg.eps));
  }
}

// Width list for a plain tanh MLP; the final layer is linear.
struct MlpSpec {
  int input_dim = 0;
  std::vector<int> widths;  // hidden widths then output width

  std::string describe() const {
    std::string s = "mlp:" + std::to_string(input_dim);
    for (int w : widths) s += "-" + std::to_string(w);
    s += ";act=tanh";
    return s;
  }
};

// Registers w{i}/b{i} parameters for the spec (all zero; caller initializes).
template <class T>
void mlp_alloc(ParamSetT<T>& params, const MlpSpec& spec) {
  int in = spec.input_dim;
  for (size_t i = 0; i < spec.widths.size(); ++i) {
    params.add("w" + std::to_string(i), in, spec.widths[i]);
    params.add("b" + std::to_string(i), 1, spec.widths[i]);
    in = spec.widths[i];
  }
}

template <class T>
void mlp_init(ParamSetT<T>& params, const MlpSpec& spec, uint64_t seed) {
  Rng rng(mix64(seed, 0x6d6c70));
  int in = spec.input_dim;
  for (size_t i = 0; i < spec.widths.size(); ++i) {
    MatX<T>& w = params["w" + std::to_string(i)];
    T sd = static_cast<T>(std::sqrt(1.0 / static_cast<double>(in)));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c)
        w(r, c) = static_cast<T>(rng.normal()) * sd;
    in = spec.widths[i];
  }
}

// Taped forward pass: tanh on every layer but the last.
template <class T>
Var<T> mlp_forward(Tape<T>& tape, const ParamSetT<T>& params,
                   const MatX<T>& input, const MlpSpec& spec,
                   std::vector<Var<T>>* param_vars = nullptr) {
  if (input.cols() != spec.input_dim)
    throw ConfigError("mlp_forward: input dim " + std::to_string(input.cols()) +
                      " != spec " + std::to_string(spec.input_dim));
  Var<T> h = tape.constant(input);
  for (size_t i = 0; i < spec.widths.size(); ++i) {
    std::string wi = "w" + std::to_string(i), bi = "b" + std::to_string(i);
    Var<T> w = tape.leaf(params[wi], wi);
    Var<T> b = tape.leaf(params[bi], bi);
    if (param_vars) {
      param_vars->push_back(w);
      param_vars->push_back(b);
    }
    h = add_rowvec(matmul(h, w), b);
    if (i + 1 < spec.widths.size()) h = tanh(h);
  }
  return h;
}

// Loss probe: a pure evaluator plus an analytic-gradient producer over the
// same parameters. Keeping both callables explicit lets the check drive any
// loss in the codebase without knowing how its graph is built.
template <class T>
struct LossProbe {
  std::function<T(const ParamSetT<T>&)> loss;
  std::function<GradMap<T>(const ParamSetT<T>&)> grad;
};

// Max over checked coordinates of |analytic - numeric| / (|numeric| + 1e-8),
// central differences with the given step. coord_cap < 0 checks everything;
// otherwise a seeded subsample of coordinates per parameter.
template <class T>
double finite_diff_check(const ParamSetT<T>& params, const LossProbe<T>& probe,
                         double step, int coord_cap = -1, uint64_t seed = 17) {
  ParamSetT<T> work = params;
  GradMap<T> analytic = probe.grad(work);
  double worst = 0.0;
  Rng rng(mix64(seed, 0xfd));
  for (auto& e : work.entries) {
    auto it = analytic.find(e.name);
    if (it == analytic.end()) continue;
    const Eigen::Index n = e.value.size();
    std::vector<Eigen::Index> coords;
    if (coord_cap < 0 || coord_cap >= n) {
      coords.resize(static_cast<size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int i = 0; i < coord_cap; ++i)
        coords.push_back(static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(n))));
    }
    for (Eigen::Index ci : coords) {
      T* p = e.value.data() + ci;
      const T orig = *p;
      *p = orig + static_cast<T>(step);
      double up = static_cast<double>(probe.loss(work));
      *p = orig - static_cast<T>(step);
      double dn = static_cast<double>(probe.loss(work));
      *p = orig;
      double numeric = (up - dn) / (2.0 * step);
      double a = static_cast<double>(it->second.data()[ci]);
      double rel = std::abs(a - numeric) / (std::abs(numeric) + 1e-8);
      if (rel > worst) worst = rel;
    }
  }
  return worst;
}

}  // namespace genloop::nn
