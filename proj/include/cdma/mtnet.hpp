#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

#include "cdma/attention.hpp"
#include "cdma/graph.hpp"

namespace cdma {

/// Architecture of the shared encoder and the attention-specialised decoder
/// branches. The decoders are identical apart from their attention kind.
struct ArchConfig {
  int levels = 3;
  std::vector<int> channels = {16, 32, 64};
  int in_channels = 3;
  int classes = 2;
  int reduction = 4;
  int sa_kernel = 7;
  std::vector<BranchKind> branch_kinds = {BranchKind::kCa, BranchKind::kSa,
                                          BranchKind::kCsa};

  int branch_count() const { return static_cast<int>(branch_kinds.size()); }
  int downsample_factor() const { return 1 << (levels - 1); }

  bool uses_ca() const {
    for (BranchKind k : branch_kinds)
      if (k == BranchKind::kCa || k == BranchKind::kCsa) return true;
    return false;
  }

  void validate() const {
    check_config(levels >= 2, "arch.levels must be >= 2");
    check_config(static_cast<int>(channels.size()) == levels,
                 "arch.channels must list one width per level (" +
                     std::to_string(levels) + " expected, got " +
                     std::to_string(channels.size()) + ")");
    for (int c : channels)
      check_config(c >= 1, "arch.channels entries must be positive");
    check_config(in_channels >= 1, "arch.in_channels must be >= 1");
    check_config(classes >= 2, "arch.classes must be >= 2");
    check_config(sa_kernel >= 1 && sa_kernel % 2 == 1,
                 "arch.sa_kernel must be odd");
    check_config(!branch_kinds.empty(), "arch.branch_kinds must be non-empty");
    if (uses_ca()) {
      check_config(reduction >= 1, "arch.reduction must be >= 1");
      for (int l = 0; l < levels - 1; ++l)
        check_config(channels[l] % reduction == 0,
                     "arch.channels[" + std::to_string(l) +
                         "] must be divisible by arch.reduction for CA");
    }
  }
};

/// Input perturbations applied to the bottleneck feature entering each
/// decoder (dropout then multiplicative feature noise), training mode only.
struct PerturbationConfig {
  double dropout_rate = 0.5;
  double noise_amplitude = 0.3;
  bool enabled = false;
};

template <class T>
struct ConvBlockT {
  TensorT<T> w, b;
};

template <class T>
struct EncoderLevelT {
  ConvBlockT<T> conv0, conv1;
};

template <class T>
struct AttentionParamsT {
  BranchKind kind = BranchKind::kNone;
  CaParamsT<T> ca;  // empty unless kind uses CA
  SaParamsT<T> sa;  // empty unless kind uses SA
};

template <class T>
struct DecoderLevelT {
  ConvBlockT<T> fuse;  // 3x3 conv after skip concatenation
  AttentionParamsT<T> att;
  ConvBlockT<T> conv;  // 3x3 conv block following the attention
};

template <class T>
struct DecoderParamsT {
  std::vector<DecoderLevelT<T>> levels;  // index 0 = coarsest decoded level
  ConvBlockT<T> head;                    // 1x1 conv to class logits
};

template <class T>
struct MTNetParamsT {
  ArchConfig arch;
  std::vector<EncoderLevelT<T>> encoder;
  std::vector<DecoderParamsT<T>> decoders;
};

using MTNetParams = MTNetParamsT<float>;

namespace detail_mtnet {

template <class T, class F>
void visit_conv(ConvBlockT<T>& c, const std::string& prefix, F&& fn) {
  fn(prefix + ".w", c.w);
  fn(prefix + ".b", c.b);
}

template <class T, class F>
void visit_attention(AttentionParamsT<T>& a, const std::string& prefix,
                     F&& fn) {
  if (a.kind == BranchKind::kCa || a.kind == BranchKind::kCsa) {
    fn(prefix + ".ca.w1", a.ca.w1);
    fn(prefix + ".ca.b1", a.ca.b1);
    fn(prefix + ".ca.w2", a.ca.w2);
    fn(prefix + ".ca.b2", a.ca.b2);
  }
  if (a.kind == BranchKind::kSa || a.kind == BranchKind::kCsa) {
    fn(prefix + ".sa.w", a.sa.w);
    fn(prefix + ".sa.b", a.sa.b);
  }
}

}  // namespace detail_mtnet

template <class T, class F>
void for_each_encoder_param(MTNetParamsT<T>& p, F&& fn) {
  for (size_t l = 0; l < p.encoder.size(); ++l) {
    std::string prefix = "enc" + std::to_string(l);
    detail_mtnet::visit_conv(p.encoder[l].conv0, prefix + ".conv0", fn);
    detail_mtnet::visit_conv(p.encoder[l].conv1, prefix + ".conv1", fn);
  }
}

/// Visits exactly the parameters owned by one decoder branch (its levels and
/// its head); encoder parameters are excluded.
template <class T, class F>
void for_each_branch_param(MTNetParamsT<T>& p, int branch, F&& fn) {
  check(branch >= 0 && branch < static_cast<int>(p.decoders.size()),
        "unknown branch id " + std::to_string(branch));
  DecoderParamsT<T>& d = p.decoders[static_cast<size_t>(branch)];
  std::string bp = "dec" + std::to_string(branch);
  for (size_t l = 0; l < d.levels.size(); ++l) {
    std::string prefix = bp + ".lvl" + std::to_string(l);
    detail_mtnet::visit_conv(d.levels[l].fuse, prefix + ".fuse", fn);
    detail_mtnet::visit_attention(d.levels[l].att, prefix, fn);
    detail_mtnet::visit_conv(d.levels[l].conv, prefix + ".conv", fn);
  }
  detail_mtnet::visit_conv(d.head, bp + ".head", fn);
}

/// Visits every learnable tensor in a fixed, stable order (encoder first,
/// then each decoder). This order defines checkpoint layout and SGD state.
template <class T, class F>
void for_each_param(MTNetParamsT<T>& p, F&& fn) {
  for_each_encoder_param(p, fn);
  for (size_t i = 0; i < p.decoders.size(); ++i)
    for_each_branch_param(p, static_cast<int>(i), fn);
}

template <class T>
int64_t param_count(MTNetParamsT<T>& p) {
  int64_t n = 0;
  for_each_param(p, [&](const std::string&, TensorT<T>& t) { n += t.numel(); });
  return n;
}

template <class T>
AttentionParamsT<T> init_attention(BranchKind kind, int channels,
                                   const ArchConfig& arch, Rng& rng) {
  AttentionParamsT<T> a;
  a.kind = kind;
  if (kind == BranchKind::kCa || kind == BranchKind::kCsa)
    a.ca = init_ca<T>(channels, arch.reduction, rng);
  if (kind == BranchKind::kSa || kind == BranchKind::kCsa)
    a.sa = init_sa<T>(arch.sa_kernel, rng);
  return a;
}

template <class T>
ConvBlockT<T> init_conv(int cin, int cout, int k, Rng& rng) {
  ConvBlockT<T> c;
  c.w = kaiming_uniform<T>({cout, cin, k, k}, cin * k * k, rng);
  c.b = TensorT<T>::zeros({cout});
  return c;
}

/// Deterministic parameter initialisation: the same seed yields bitwise
/// identical parameters.
template <class T>
MTNetParamsT<T> init_mtnet(uint64_t seed, const ArchConfig& arch) {
  arch.validate();
  Rng rng(mix_seed(seed ^ 0x6d746e6574ull));  // distinct stream per purpose
  MTNetParamsT<T> p;
  p.arch = arch;
  int L = arch.levels;
  for (int l = 0; l < L; ++l) {
    int cin = l == 0 ? arch.in_channels : arch.channels[l - 1];
    int c = arch.channels[l];
    EncoderLevelT<T> lvl;
    lvl.conv0 = init_conv<T>(cin, c, 3, rng);
    lvl.conv1 = init_conv<T>(c, c, 3, rng);
    p.encoder.push_back(std::move(lvl));
  }
  for (BranchKind kind : arch.branch_kinds) {
    DecoderParamsT<T> dec;
    for (int l = L - 2; l >= 0; --l) {
      DecoderLevelT<T> lvl;
      int cin = arch.channels[l + 1] + arch.channels[l];
      lvl.fuse = init_conv<T>(cin, arch.channels[l], 3, rng);
      lvl.att = init_attention<T>(kind, arch.channels[l], arch, rng);
      lvl.conv = init_conv<T>(arch.channels[l], arch.channels[l], 3, rng);
      dec.levels.push_back(std::move(lvl));
    }
    dec.head = init_conv<T>(arch.channels[0], arch.classes, 1, rng);
    p.decoders.push_back(std::move(dec));
  }
  return p;
}

// ---- graph binding and forward ------------------------------------------

struct ConvNodes {
  int w, b;
};

struct AttNodes {
  BranchKind kind = BranchKind::kNone;
  CaNodes ca{};
  SaNodes sa{};
};

struct DecLevelNodes {
  ConvNodes fuse;
  AttNodes att;
  ConvNodes conv;
};

struct DecNodes {
  std::vector<DecLevelNodes> levels;
  ConvNodes head;
};

/// Parameters leafed into one graph; `named` pairs every node with its
/// parameter name in for_each_param order (used to harvest gradients).
struct MTNetNodes {
  std::vector<std::array<ConvNodes, 2>> encoder;
  std::vector<DecNodes> decoders;
  std::vector<std::pair<std::string, int>> named;
};

template <class T>
MTNetNodes bind_mtnet(GraphT<T>& g, MTNetParamsT<T>& params, bool trainable) {
  MTNetNodes out;
  std::unordered_map<const TensorT<T>*, int> ids;
  for_each_param(params, [&](const std::string& name, TensorT<T>& t) {
    t.requires_grad = trainable;
    int id = g.leaf(t);
    ids[&t] = id;
    out.named.emplace_back(name, id);
  });
  auto conv_of = [&](ConvBlockT<T>& c) {
    return ConvNodes{ids.at(&c.w), ids.at(&c.b)};
  };
  for (auto& lvl : params.encoder)
    out.encoder.push_back({conv_of(lvl.conv0), conv_of(lvl.conv1)});
  for (auto& dec : params.decoders) {
    DecNodes dn;
    for (auto& lvl : dec.levels) {
      DecLevelNodes ln;
      ln.fuse = conv_of(lvl.fuse);
      ln.conv = conv_of(lvl.conv);
      ln.att.kind = lvl.att.kind;
      if (ln.att.kind == BranchKind::kCa || ln.att.kind == BranchKind::kCsa)
        ln.att.ca = CaNodes{ids.at(&lvl.att.ca.w1), ids.at(&lvl.att.ca.b1),
                            ids.at(&lvl.att.ca.w2), ids.at(&lvl.att.ca.b2)};
      if (ln.att.kind == BranchKind::kSa || ln.att.kind == BranchKind::kCsa)
        ln.att.sa = SaNodes{ids.at(&lvl.att.sa.w), ids.at(&lvl.att.sa.b)};
      dn.levels.push_back(ln);
    }
    dn.head = conv_of(dec.head);
    out.decoders.push_back(std::move(dn));
  }
  return out;
}

/// Logits and standard-softmax probabilities for every branch of one forward
/// pass; all branches share the encoder output computed exactly once.
template <class T>
struct BranchOutputsT {
  std::vector<int> logits;
  std::vector<int> probs;
  std::vector<BranchKind> kinds;
  int batch = 0, classes = 0, height = 0, width = 0;
  int encoder_passes = 0;
};

template <class T>
int attention_apply(GraphT<T>& g, int f, const AttNodes& att) {
  switch (att.kind) {
    case BranchKind::kCa: return ca_forward(g, f, att.ca);
    case BranchKind::kSa: return sa_forward(g, f, att.sa);
    case BranchKind::kCsa:
      return sa_forward(g, ca_forward(g, f, att.ca), att.sa);
    case BranchKind::kNone: return f;
  }
  return f;
}

/// One pass computes all branch logits and probabilities. Perturbations are
/// drawn independently per branch when enabled; `rng` may be null when they
/// are disabled.
template <class T>
BranchOutputsT<T> mtnet_forward(GraphT<T>& g, const MTNetNodes& net,
                                const ArchConfig& arch, int x,
                                const PerturbationConfig& pert,
                                Rng* rng = nullptr) {
  const TensorT<T>& vx = g.value(x);
  check(vx.ndim() == 4, "mtnet_forward: input must be 4-D");
  check(vx.dim(1) == arch.in_channels,
        "mtnet_forward: expected " + std::to_string(arch.in_channels) +
            " input channels, got " + std::to_string(vx.dim(1)));
  int f = arch.downsample_factor();
  check(vx.dim(2) % f == 0 && vx.dim(3) % f == 0,
        "mtnet_forward: spatial size " + std::to_string(vx.dim(2)) + "x" +
            std::to_string(vx.dim(3)) + " must be divisible by " +
            std::to_string(f));
  check(!pert.enabled || rng != nullptr,
        "mtnet_forward: rng required when perturbations are enabled");

  BranchOutputsT<T> out;
  out.kinds = arch.branch_kinds;
  int L = arch.levels;

  // Shared encoder, evaluated once.
  std::vector<int> skips;
  int cur = x;
  for (int l = 0; l < L; ++l) {
    cur = g.relu(g.conv2d(cur, net.encoder[l][0].w, net.encoder[l][0].b, 1, 1));
    cur = g.relu(g.conv2d(cur, net.encoder[l][1].w, net.encoder[l][1].b, 1, 1));
    if (l < L - 1) {
      skips.push_back(cur);
      cur = g.max_pool2d(cur, 2, 2);
    }
  }
  int bottleneck = cur;
  out.encoder_passes = 1;

  for (const DecNodes& dec : net.decoders) {
    int feat = bottleneck;
    if (pert.enabled) {
      feat = g.dropout(feat, pert.dropout_rate, *rng, true);
      feat = g.feature_noise(feat, pert.noise_amplitude, *rng, true);
    }
    for (size_t li = 0; li < dec.levels.size(); ++li) {
      int skip_level = L - 2 - static_cast<int>(li);
      const DecLevelNodes& lvl = dec.levels[li];
      feat = g.upsample_nearest(feat, 2);
      feat = g.concat_channels(feat, skips[static_cast<size_t>(skip_level)]);
      feat = g.relu(g.conv2d(feat, lvl.fuse.w, lvl.fuse.b, 1, 1));
      feat = attention_apply(g, feat, lvl.att);
      feat = g.relu(g.conv2d(feat, lvl.conv.w, lvl.conv.b, 1, 1));
    }
    int z = g.conv2d(feat, dec.head.w, dec.head.b, 0, 1);
    out.logits.push_back(z);
    out.probs.push_back(g.softmax_channel(z));
  }

  const TensorT<T>& z0 = g.value(out.logits[0]);
  out.batch = z0.dim(0);
  out.classes = z0.dim(1);
  out.height = z0.dim(2);
  out.width = z0.dim(3);
  return out;
}

}  // namespace cdma
