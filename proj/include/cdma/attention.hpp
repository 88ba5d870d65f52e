#pragma once

#include <string>

#include "cdma/graph.hpp"

namespace cdma {

enum class BranchKind { kCa, kSa, kCsa, kNone };

inline std::string to_string(BranchKind k) {
  switch (k) {
    case BranchKind::kCa: return "ca";
    case BranchKind::kSa: return "sa";
    case BranchKind::kCsa: return "csa";
    case BranchKind::kNone: return "none";
  }
  return "?";
}

inline BranchKind branch_kind_from(const std::string& s) {
  if (s == "ca") return BranchKind::kCa;
  if (s == "sa") return BranchKind::kSa;
  if (s == "csa") return BranchKind::kCsa;
  if (s == "none") return BranchKind::kNone;
  throw ConfigError("unknown branch kind '" + s +
                    "' (expected ca|sa|csa|none)");
}

/// Channel attention parameters: one two-layer MLP shared by the average-
/// and max-pooled paths.
template <class T>
struct CaParamsT {
  TensorT<T> w1, b1;  // [C/r, C], [C/r]
  TensorT<T> w2, b2;  // [C, C/r], [C]
  int reduction = 4;
};

/// Spatial attention parameters: a single conv over the 2-channel
/// (avg ++ max) map.
template <class T>
struct SaParamsT {
  TensorT<T> w;  // [1, 2, k, k]
  TensorT<T> b;  // [1]
};

template <class T>
struct CsaParamsT {
  CaParamsT<T> ca;
  SaParamsT<T> sa;
};

/// Kaiming-uniform fan-in for weights, zeros for biases.
template <class T>
TensorT<T> kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  TensorT<T> t(std::move(shape));
  double bound = std::sqrt(6.0 / fan_in);
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
CaParamsT<T> init_ca(int channels, int reduction, Rng& rng) {
  check_config(reduction >= 1, "CA reduction must be >= 1");
  check_config(channels % reduction == 0,
               "CA channels (" + std::to_string(channels) +
                   ") must be divisible by reduction " +
                   std::to_string(reduction));
  int hidden = channels / reduction;
  CaParamsT<T> p;
  p.reduction = reduction;
  p.w1 = kaiming_uniform<T>({hidden, channels}, channels, rng);
  p.b1 = TensorT<T>::zeros({hidden});
  p.w2 = kaiming_uniform<T>({channels, hidden}, hidden, rng);
  p.b2 = TensorT<T>::zeros({channels});
  return p;
}

template <class T>
SaParamsT<T> init_sa(int kernel, Rng& rng) {
  check_config(kernel >= 1 && kernel % 2 == 1, "SA kernel must be odd");
  SaParamsT<T> p;
  p.w = kaiming_uniform<T>({1, 2, kernel, kernel}, 2 * kernel * kernel, rng);
  p.b = TensorT<T>::zeros({1});
  return p;
}

// Graph-bound parameter handles.
struct CaNodes {
  int w1, b1, w2, b2;
};
struct SaNodes {
  int w, b;
};
struct CsaNodes {
  CaNodes ca;
  SaNodes sa;
};

template <class T>
CaNodes bind_ca(GraphT<T>& g, const CaParamsT<T>& p) {
  return {g.leaf(p.w1), g.leaf(p.b1), g.leaf(p.w2), g.leaf(p.b2)};
}

template <class T>
SaNodes bind_sa(GraphT<T>& g, const SaParamsT<T>& p) {
  return {g.leaf(p.w), g.leaf(p.b)};
}

/// F_c = F . sigmoid(MLP(avgpool_S(F)) + MLP(maxpool_S(F))); the per-channel
/// gate is broadcast over all spatial positions.
template <class T>
int ca_forward(GraphT<T>& g, int f, const CaNodes& p) {
  const TensorT<T>& vf = g.value(f);
  check(vf.ndim() == 4, "ca_forward: expects 4-D input");
  int C = vf.dim(1);
  check(g.value(p.w1).dim(1) == C,
        "ca_forward: input has " + std::to_string(C) +
            " channels but params expect " +
            std::to_string(g.value(p.w1).dim(1)));
  int B = vf.dim(0);
  auto mlp = [&](int pooled) {
    int v = g.reshape(pooled, {B, C});
    int h = g.relu(g.linear(v, p.w1, p.b1));
    return g.linear(h, p.w2, p.b2);
  };
  int avg = mlp(g.spatial_pool(f, PoolMode::kAvg));
  int mx = mlp(g.spatial_pool(f, PoolMode::kMax));
  int gate = g.reshape(g.sigmoid(g.add(avg, mx)), {B, C, 1, 1});
  return g.mul_bcast(f, gate);
}

/// F_s = F . sigmoid(Conv(avgpool_C(F) ++ maxpool_C(F))); the single-channel
/// gate is broadcast over all channels. Padding keeps the gate at H x W.
template <class T>
int sa_forward(GraphT<T>& g, int f, const SaNodes& p) {
  const TensorT<T>& vf = g.value(f);
  check(vf.ndim() == 4, "sa_forward: expects 4-D input");
  int k = g.value(p.w).dim(2);
  int cat = g.concat_channels(g.channel_pool(f, PoolMode::kAvg),
                              g.channel_pool(f, PoolMode::kMax));
  int gate = g.sigmoid(g.conv2d(cat, p.w, p.b, (k - 1) / 2, 1));
  return g.mul_bcast(f, gate);
}

/// CA block followed by an SA block.
template <class T>
int csa_forward(GraphT<T>& g, int f, const CsaNodes& p) {
  return sa_forward(g, ca_forward(g, f, p.ca), p.sa);
}

}  // namespace cdma
