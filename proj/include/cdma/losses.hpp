#pragma once

#include <string>
#include <vector>

#include "cdma/mtnet.hpp"

namespace cdma {

inline constexpr double kProbClamp = 1e-8;  // inside every log
inline constexpr double kDiceSmooth = 1e-5;

struct LossWeights {
  double lambda1 = 0.1;      // weight of the cross-decoder distillation term
  double lambda2 = 0.1;      // weight of the uncertainty term
  double temperature = 10.0;
};

/// Loss arms selectable from configuration. kSl is the supervised-only
/// baseline; kCdma is the full objective.
enum class Variant { kSl, kArgmax, kT1, kCdkd, kCdkdUmPrime, kCdma };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kSl: return "sl";
    case Variant::kArgmax: return "argmax";
    case Variant::kT1: return "t1";
    case Variant::kCdkd: return "cdkd";
    case Variant::kCdkdUmPrime: return "cdkd_ump";
    case Variant::kCdma: return "cdma";
  }
  return "?";
}

inline Variant variant_from(const std::string& s) {
  if (s == "sl") return Variant::kSl;
  if (s == "argmax") return Variant::kArgmax;
  if (s == "t1") return Variant::kT1;
  if (s == "cdkd") return Variant::kCdkd;
  if (s == "cdkd_ump") return Variant::kCdkdUmPrime;
  if (s == "cdma") return Variant::kCdma;
  throw ConfigError("unknown loss variant '" + s +
                    "' (expected sl|argmax|t1|cdkd|cdkd_ump|cdma)");
}

/// Direction of the distillation KL. The default treats the detached
/// branch as the distribution the student must cover.
enum class KlDirection { kTeacherStudent, kStudentTeacher };

inline KlDirection kl_direction_from(const std::string& s) {
  if (s == "teacher_student") return KlDirection::kTeacherStudent;
  if (s == "student_teacher") return KlDirection::kStudentTeacher;
  throw ConfigError("unknown kl_direction '" + s +
                    "' (expected teacher_student|student_teacher)");
}

struct LossReport {
  double sup = 0, cdkd = 0, um = 0, total = 0;
  std::vector<double> kd_per_branch;
};

// ---- elementary losses ----------------------------------------------------

/// Per-pixel softmax of Z/T. T = 1 is bitwise identical to softmax_channel.
template <class T>
int t_softmax(GraphT<T>& g, int z, double temperature) {
  check(temperature > 0, "t_softmax: temperature must be > 0");
  return g.softmax_channel(g.div_scalar(z, temperature));
}

namespace detail_loss {

/// Mean over pixels of sum_c p_c (log p_c - log q_c) with p detached when
/// `detach_p`. Probabilities are clamped to [1e-8, 1] inside the logs.
template <class T>
int kl_mean(GraphT<T>& g, int p, int q, bool detach_p) {
  const TensorT<T>& vp = g.value(p);
  const TensorT<T>& vq = g.value(q);
  check(vp.same_shape(vq), "kl: shape mismatch " + shape_str(vp.shape) +
                               " vs " + shape_str(vq.shape));
  check(vp.ndim() == 4, "kl: expects 4-D probability maps");
  int64_t pixels =
      static_cast<int64_t>(vp.dim(0)) * vp.dim(2) * vp.dim(3);
  int pp = detach_p ? g.detach(p) : p;
  int diff = g.sub(g.log_clamped(pp, kProbClamp), g.log_clamped(q, kProbClamp));
  return g.div_scalar(g.sum(g.mul(pp, diff)), static_cast<double>(pixels));
}

template <class T>
int64_t pixel_count(const GraphT<T>& g, int prob_node) {
  const TensorT<T>& v = g.value(prob_node);
  return static_cast<int64_t>(v.dim(0)) * v.dim(2) * v.dim(3);
}

/// -1/N sum_i sum_c p log p over a probability map node.
template <class T>
int entropy_mean(GraphT<T>& g, int p) {
  int64_t pixels = pixel_count(g, p);
  return g.div_scalar(g.sum(g.mul(p, g.log_clamped(p, kProbClamp))),
                      -static_cast<double>(pixels));
}

}  // namespace detail_loss

/// KL(target || student) averaged over pixels; the target is
/// gradient-detached so it acts as a fixed teacher distribution.
template <class T>
int kl_map(GraphT<T>& g, int target, int student) {
  return detail_loss::kl_mean(g, target, student, /*detach_p=*/true);
}

struct CdkdNodes {
  int total = -1;
  std::vector<int> per_branch;  // KD loss of each branch as student
};

/// Cross-decoder distillation: each branch is the student of every other
/// branch's detached T-softened prediction; the total is the mean over
/// branches. Gradients of per_branch[b] reach only branch b's parameters.
template <class T>
CdkdNodes cdkd_loss(GraphT<T>& g, const BranchOutputsT<T>& out,
                    double temperature,
                    KlDirection dir = KlDirection::kTeacherStudent) {
  int n = static_cast<int>(out.logits.size());
  if (n < 2)
    throw ConfigError("cdkd_loss: needs at least two branches, got " +
                      std::to_string(n));
  std::vector<int> soft;
  soft.reserve(static_cast<size_t>(n));
  for (int b = 0; b < n; ++b)
    soft.push_back(t_softmax(g, out.logits[static_cast<size_t>(b)], temperature));

  CdkdNodes res;
  for (int b = 0; b < n; ++b) {
    int acc = -1;
    for (int t = 0; t < n; ++t) {
      if (t == b) continue;
      int term =
          dir == KlDirection::kTeacherStudent
              ? detail_loss::kl_mean(g, soft[static_cast<size_t>(t)],
                                     soft[static_cast<size_t>(b)], true)
              : detail_loss::kl_mean(g, soft[static_cast<size_t>(b)],
                                     g.detach(soft[static_cast<size_t>(t)]),
                                     false);
      acc = acc < 0 ? term : g.add(acc, term);
    }
    res.per_branch.push_back(acc);
  }
  int sum = res.per_branch[0];
  for (int b = 1; b < n; ++b) sum = g.add(sum, res.per_branch[static_cast<size_t>(b)]);
  res.total = g.div_scalar(sum, static_cast<double>(n));
  return res;
}

/// One-hot of the per-pixel argmax over channels; ties break toward the
/// lower class index.
template <class T>
TensorT<T> argmax_onehot(const TensorT<T>& prob) {
  check(prob.ndim() == 4, "argmax_onehot: expects 4-D");
  int B = prob.dim(0), C = prob.dim(1), H = prob.dim(2), W = prob.dim(3);
  TensorT<T> out(prob.shape, T(0));
  int64_t plane = static_cast<int64_t>(H) * W;
  for (int b = 0; b < B; ++b) {
    const T* pb = &prob.data[static_cast<size_t>(b) * C * plane];
    T* ob = &out.data[static_cast<size_t>(b) * C * plane];
    for (int64_t i = 0; i < plane; ++i) {
      int best = 0;
      for (int c = 1; c < C; ++c)
        if (pb[c * plane + i] > pb[best * plane + i]) best = c;
      ob[best * plane + i] = T(1);
    }
  }
  return out;
}

/// Hard cross-pseudo-label variant: each branch is supervised by
/// cross-entropy against the argmax one-hot of each other branch's detached
/// probabilities.
template <class T>
CdkdNodes argmax_pseudo_loss(GraphT<T>& g, const BranchOutputsT<T>& out) {
  int n = static_cast<int>(out.probs.size());
  if (n < 2)
    throw ConfigError("argmax_pseudo_loss: needs at least two branches");
  CdkdNodes res;
  for (int b = 0; b < n; ++b) {
    int64_t pixels = detail_loss::pixel_count(g, out.probs[static_cast<size_t>(b)]);
    int logp = g.log_clamped(out.probs[static_cast<size_t>(b)], kProbClamp);
    int acc = -1;
    for (int t = 0; t < n; ++t) {
      if (t == b) continue;
      int onehot =
          g.constant(argmax_onehot(g.value(out.probs[static_cast<size_t>(t)])));
      int term = g.div_scalar(g.sum(g.mul(onehot, logp)),
                              -static_cast<double>(pixels));
      acc = acc < 0 ? term : g.add(acc, term);
    }
    res.per_branch.push_back(acc);
  }
  int sum = res.per_branch[0];
  for (int b = 1; b < n; ++b) sum = g.add(sum, res.per_branch[static_cast<size_t>(b)]);
  res.total = g.div_scalar(sum, static_cast<double>(n));
  return res;
}

/// Entropy of the branch-averaged prediction; gradients flow to all
/// branches. Low values force the branches toward a shared confident output.
template <class T>
int um_loss(GraphT<T>& g, const BranchOutputsT<T>& out) {
  int n = static_cast<int>(out.probs.size());
  check(n >= 1, "um_loss: no branches");
  int acc = out.probs[0];
  for (int b = 1; b < n; ++b) acc = g.add(acc, out.probs[static_cast<size_t>(b)]);
  int pbar = g.div_scalar(acc, static_cast<double>(n));
  return detail_loss::entropy_mean(g, pbar);
}

/// Ablation variant: entropy minimisation applied to each branch
/// independently (mean of per-branch entropies). Confident but conflicting
/// branches score near zero here while um_loss stays high.
template <class T>
int um_prime_loss(GraphT<T>& g, const BranchOutputsT<T>& out) {
  int n = static_cast<int>(out.probs.size());
  check(n >= 1, "um_prime_loss: no branches");
  int acc = -1;
  for (int b = 0; b < n; ++b) {
    int e = detail_loss::entropy_mean(g, out.probs[static_cast<size_t>(b)]);
    acc = acc < 0 ? e : g.add(acc, e);
  }
  return g.div_scalar(acc, static_cast<double>(n));
}

/// One-hot encoding of an integer class mask [B,H,W] -> [B,C,H,W].
template <class T>
TensorT<T> onehot_from_mask(const TensorT<T>& mask, int classes) {
  check(mask.ndim() == 3, "onehot_from_mask: mask must be [B,H,W]");
  int B = mask.dim(0), H = mask.dim(1), W = mask.dim(2);
  TensorT<T> out({B, classes, H, W}, T(0));
  int64_t plane = static_cast<int64_t>(H) * W;
  for (int b = 0; b < B; ++b)
    for (int64_t i = 0; i < plane; ++i) {
      double v = static_cast<double>(mask.data[static_cast<size_t>(b) * plane + i]);
      int c = static_cast<int>(v);
      check(v == c && c >= 0 && c < classes,
            "mask label " + std::to_string(v) + " outside [0," +
                std::to_string(classes) + ")");
      out.data[(static_cast<size_t>(b) * classes + c) * plane + i] = T(1);
    }
  return out;
}

/// Soft Dice loss on the foreground channel of a binary task.
template <class T>
int dice_loss(GraphT<T>& g, int p, const TensorT<T>& onehot) {
  const TensorT<T>& vp = g.value(p);
  check(vp.ndim() == 4 && vp.dim(1) == 2, "dice_loss: expects [B,2,H,W]");
  check(vp.same_shape(onehot), "dice_loss: mask shape mismatch");
  int64_t plane = static_cast<int64_t>(onehot.dim(2)) * onehot.dim(3);
  for (int b = 0; b < onehot.dim(0); ++b)
    for (int64_t i = 0; i < plane; ++i) {
      T c0 = onehot.data[static_cast<size_t>(b) * 2 * plane + i];
      T c1 = onehot.data[static_cast<size_t>(b) * 2 * plane + plane + i];
      check((c0 == T(0) || c0 == T(1)) && c0 + c1 == T(1),
            "dice_loss: mask is not one-hot");
    }
  TensorT<T> fg({onehot.dim(0), 1, onehot.dim(2), onehot.dim(3)});
  for (int b = 0; b < onehot.dim(0); ++b)
    std::memcpy(&fg.data[static_cast<size_t>(b) * plane],
                &onehot.data[static_cast<size_t>(b) * 2 * plane + plane],
                sizeof(T) * plane);
  int pf = g.slice_channels(p, 1, 2);
  int gf = g.constant(std::move(fg));
  int inter = g.sum(g.mul(pf, gf));
  int num = g.affine(inter, 2.0, kDiceSmooth);
  int den = g.affine(g.add(g.sum(pf), g.sum(gf)), 1.0, kDiceSmooth);
  return g.affine(g.div(num, den), -1.0, 1.0);
}

/// Mean over pixels of -log p_true.
template <class T>
int ce_loss(GraphT<T>& g, int p, const TensorT<T>& mask) {
  const TensorT<T>& vp = g.value(p);
  check(vp.ndim() == 4, "ce_loss: expects 4-D probabilities");
  TensorT<T> onehot = onehot_from_mask(mask, vp.dim(1));
  check(vp.same_shape(onehot), "ce_loss: mask shape mismatch");
  int64_t pixels = detail_loss::pixel_count(g, p);
  return g.div_scalar(
      g.sum(g.mul(g.constant(std::move(onehot)), g.log_clamped(p, kProbClamp))),
      -static_cast<double>(pixels));
}

/// Mean over branches of Dice + cross entropy on the standard-softmax
/// probabilities; labeled sub-batch only.
template <class T>
int sup_loss(GraphT<T>& g, const BranchOutputsT<T>& out, const TensorT<T>& mask) {
  int n = static_cast<int>(out.probs.size());
  check(n >= 1, "sup_loss: no branches");
  TensorT<T> onehot = onehot_from_mask(mask, out.classes);
  int acc = -1;
  for (int b = 0; b < n; ++b) {
    int p = out.probs[static_cast<size_t>(b)];
    int term = g.add(dice_loss(g, p, onehot), ce_loss(g, p, mask));
    acc = acc < 0 ? term : g.add(acc, term);
  }
  return g.div_scalar(acc, static_cast<double>(n));
}

// ---- combined objective -----------------------------------------------

template <class T>
struct TotalLossT {
  int node = -1;
  LossReport report;
};

/// L = L_sup + lambda1 * L_cdkd + lambda2 * L_um, with the distillation and
/// uncertainty terms computed over the labeled and unlabeled sub-batches
/// combined (pixel-weighted) and the variant selecting the ablation arm.
template <class T>
TotalLossT<T> total_loss(GraphT<T>& g, const BranchOutputsT<T>* labeled,
                         const TensorT<T>* labeled_mask,
                         const BranchOutputsT<T>* unlabeled,
                         const LossWeights& w, Variant variant,
                         KlDirection dir = KlDirection::kTeacherStudent) {
  check(labeled != nullptr || unlabeled != nullptr,
        "total_loss: needs at least one sub-batch");
  check(labeled == nullptr || labeled_mask != nullptr,
        "total_loss: labeled outputs require a mask");

  TotalLossT<T> res;

  int sup = -1;
  if (labeled != nullptr) sup = sup_loss(g, *labeled, *labeled_mask);

  // Pixel-weighted combination of a per-sub-batch scalar term.
  auto combine = [&](int term_l, int term_u, int64_t nl, int64_t nu) {
    if (term_l < 0) return term_u;
    if (term_u < 0) return term_l;
    double total = static_cast<double>(nl + nu);
    return g.add(g.affine(term_l, nl / total), g.affine(term_u, nu / total));
  };

  int64_t nl = labeled ? static_cast<int64_t>(labeled->batch) *
                             labeled->height * labeled->width
                       : 0;
  int64_t nu = unlabeled ? static_cast<int64_t>(unlabeled->batch) *
                               unlabeled->height * unlabeled->width
                         : 0;

  int kd = -1;
  std::vector<double> kd_per_branch;
  if (variant != Variant::kSl) {
    auto kd_of = [&](const BranchOutputsT<T>& o) {
      switch (variant) {
        case Variant::kArgmax: return argmax_pseudo_loss(g, o);
        case Variant::kT1: return cdkd_loss(g, o, 1.0, dir);
        default: return cdkd_loss(g, o, w.temperature, dir);
      }
    };
    CdkdNodes kd_l, kd_u;
    if (labeled) kd_l = kd_of(*labeled);
    if (unlabeled) kd_u = kd_of(*unlabeled);
    kd = combine(labeled ? kd_l.total : -1, unlabeled ? kd_u.total : -1, nl, nu);
    size_t branches = labeled ? kd_l.per_branch.size() : kd_u.per_branch.size();
    for (size_t b = 0; b < branches; ++b) {
      double vl = labeled ? g.value(kd_l.per_branch[b])[0] : 0.0;
      double vu = unlabeled ? g.value(kd_u.per_branch[b])[0] : 0.0;
      kd_per_branch.push_back(
          (vl * static_cast<double>(nl) + vu * static_cast<double>(nu)) /
          static_cast<double>(nl + nu));
    }
  }

  int um = -1;
  if (variant == Variant::kCdma || variant == Variant::kCdkdUmPrime) {
    auto um_of = [&](const BranchOutputsT<T>& o) {
      return variant == Variant::kCdma ? um_loss(g, o) : um_prime_loss(g, o);
    };
    int um_l = labeled ? um_of(*labeled) : -1;
    int um_u = unlabeled ? um_of(*unlabeled) : -1;
    um = combine(um_l, um_u, nl, nu);
  }

  int total = sup;
  if (kd >= 0) {
    int kd_w = g.affine(kd, w.lambda1);
    total = total < 0 ? kd_w : g.add(total, kd_w);
  }
  if (um >= 0) {
    int um_w = g.affine(um, w.lambda2);
    total = total < 0 ? um_w : g.add(total, um_w);
  }
  check(total >= 0, "total_loss: no active loss terms");

  res.node = total;
  res.report.sup = sup >= 0 ? static_cast<double>(g.value(sup)[0]) : 0.0;
  res.report.cdkd = kd >= 0 ? static_cast<double>(g.value(kd)[0]) : 0.0;
  res.report.um = um >= 0 ? static_cast<double>(g.value(um)[0]) : 0.0;
  res.report.total = static_cast<double>(g.value(total)[0]);
  res.report.kd_per_branch = std::move(kd_per_branch);
  return res;
}

}  // namespace cdma
