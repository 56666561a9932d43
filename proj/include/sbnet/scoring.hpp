#pragma once

// Description-to-frame matching score and the four-part training loss.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sbnet/heads.hpp"

namespace sbnet {

struct MatchScore {
  double mpr = 0;
  double ss = 0;
  double ctm = 0;
  double prob = 0;
  double lambda_ctm = 0.5;
};

/// Prob = MPR + SS + lambda * CTM.
inline MatchScore combine_scores(double mpr, double ss, double ctm, double lambda_ctm = 0.5) {
  return {mpr, ss, ctm, mpr + ss + lambda_ctm * ctm, lambda_ctm};
}

/// Box-restricted mean of the mask, one value per sample.
template <typename T>
std::vector<double> mask_prediction_ratio(const Tensor<T>& mask, const Tensor<T>& box) {
  if (mask.shape() != box.shape() || mask.rank() != 4 || mask.dim(1) != 1) {
    throw ShapeError("mpr: mask " + to_string(mask.shape()) + " vs box " + to_string(box.shape()));
  }
  const std::size_t n = mask.dim(0), cells = mask.dim(2) * mask.dim(3);
  std::vector<double> out(n);
  for (std::size_t b = 0; b < n; ++b) {
    double hit = 0, area = 0;
    for (std::size_t i = 0; i < cells; ++i) {
      hit += static_cast<double>(mask[b * cells + i]) * box[b * cells + i];
      area += box[b * cells + i];
    }
    if (area <= 0) throw std::invalid_argument("empty candidate box");
    out[b] = hit / area;
  }
  return out;
}

/// cs(FI_gt, FI_g) + cs(FN_gt, FN_g) per sample.
template <typename T>
std::vector<double> substitution_similarity(const SubstitutionBundle<T>& bundle) {
  NoTapeScope<T> off;
  auto image = cosine_similarity(bundle.image_target, bundle.image_generated);
  auto text = cosine_similarity(bundle.text_target, bundle.text_generated);
  std::vector<double> out(image.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(image[i]) + static_cast<double>(text[i]);
  return out;
}

/// softmax(C_i)[color] + softmax(T_i)[type] per sample.
template <typename T>
std::vector<double> color_type_match(const Tensor<T>& color_logits, const Tensor<T>& type_logits,
                                     const std::vector<int>& colors, const std::vector<int>& types) {
  if (color_logits.rank() != 2 || type_logits.rank() != 2 || color_logits.dim(0) != colors.size() ||
      type_logits.dim(0) != types.size()) {
    throw ShapeError("ctm: logits/attribute count mismatch");
  }
  auto prob_of = [](const Tensor<T>& logits, std::size_t row, int index) {
    const std::size_t k = logits.dim(1);
    if (index < 0 || static_cast<std::size_t>(index) >= k) {
      throw std::out_of_range("ctm: attribute index " + std::to_string(index) + " out of range [0, " +
                              std::to_string(k) + ")");
    }
    double mx = logits[row * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(logits[row * k + j]));
    double total = 0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(static_cast<double>(logits[row * k + j]) - mx);
    return std::exp(static_cast<double>(logits[row * k + index]) - mx) / total;
  };
  std::vector<double> out(colors.size());
  for (std::size_t r = 0; r < out.size(); ++r) {
    out[r] = prob_of(color_logits, r, colors[r]) + prob_of(type_logits, r, types[r]);
  }
  return out;
}

template <typename T>
std::vector<MatchScore> match_probability(const Tensor<T>& mask, const Tensor<T>& box,
                                          const SubstitutionBundle<T>& bundle, const Tensor<T>& image_color,
                                          const Tensor<T>& image_type, const std::vector<int>& colors,
                                          const std::vector<int>& types, double lambda_ctm = 0.5) {
  const auto m = mask_prediction_ratio(mask, box);
  const auto s = substitution_similarity(bundle);
  const auto c = color_type_match(image_color, image_type, colors, types);
  std::vector<MatchScore> out;
  for (std::size_t i = 0; i < m.size(); ++i) out.push_back(combine_scores(m[i], s[i], c[i], lambda_ctm));
  return out;
}

// ---------------------------------------------------------------------------
// Losses

/// kPositiveOnly keeps only the in-box term -mean(b log M) of the segmentation loss;
/// kMixedSign uses 2 - cs(image) + cs(text) instead of 2 - cs(image) - cs(text).
enum class SegLossMode { kTwoTerm, kPositiveOnly };
enum class SubLossMode { kCorrected, kMixedSign };

struct LossOptions {
  double lambda1 = 0.2;
  double lambda2 = 0.2;
  double label_smoothing = 0.1;
  SegLossMode seg = SegLossMode::kTwoTerm;
  SubLossMode sub = SubLossMode::kCorrected;
};

template <typename T>
struct LossReport {
  Tensor<T> total;  // differentiable L_total
  double seg = 0, cls = 0, sub = 0, fut = 0, total_value = 0;
  double lambda1 = 0.2, lambda2 = 0.2;
  std::size_t missing_future = 0;  // samples whose L_fut was zeroed
};

struct LossTargets {
  std::vector<std::int64_t> colors;  // -1 = unknown
  std::vector<std::int64_t> types;
  std::vector<bool> has_next;  // next frame available per sample
};

template <typename T>
LossReport<T> compute_losses(const Tensor<T>& mask, const Tensor<T>& box, const ClassLogits<T>& logits,
                             const LossTargets& targets, const SubstitutionBundle<T>& bundle,
                             const Tensor<T>& future, const Tensor<T>& next_frame, const LossOptions& options) {
  const std::size_t n = mask.dim(0);
  if (targets.colors.size() != n || targets.types.size() != n || targets.has_next.size() != n) {
    throw ShapeError("loss targets do not match batch size");
  }
  LossReport<T> r;
  r.lambda1 = options.lambda1;
  r.lambda2 = options.lambda2;

  Tensor<T> seg;
  if (options.seg == SegLossMode::kTwoTerm) {
    seg = binary_cross_entropy(mask, box);
  } else {
    auto clamped = clamp_straight_through(mask, kEps<T>, upper_unit_bound<T>());
    seg = scale(sum_all(mul(box, log(clamped))), T(-1) / static_cast<T>(n));
  }

  const T smoothing = static_cast<T>(options.label_smoothing);
  auto cls = add(add(cross_entropy(logits.text_color, targets.colors, smoothing),
                     cross_entropy(logits.image_color, targets.colors, smoothing)),
                 add(cross_entropy(logits.text_type, targets.types, smoothing),
                     cross_entropy(logits.image_type, targets.types, smoothing)));

  auto image_cs = cosine_similarity(bundle.image_target.detach(), bundle.image_generated);
  auto text_cs = cosine_similarity(bundle.text_target.detach(), bundle.text_generated);
  auto two = Tensor<T>::scalar(T(2));
  Tensor<T> per_sample_sub = options.sub == SubLossMode::kCorrected ? sub(sub(two, image_cs), text_cs)
                                                                    : add(sub(two, image_cs), text_cs);
  auto sub_loss = mean_all(per_sample_sub);

  if (future.shape() != next_frame.shape()) {
    throw ShapeError("future prediction " + to_string(future.shape()) + " vs target " + to_string(next_frame.shape()));
  }
  Tensor<T> available({n, 1, 1, 1});
  for (std::size_t i = 0; i < n; ++i) {
    available[i] = targets.has_next[i] ? T(1) : T(0);
    if (!targets.has_next[i]) ++r.missing_future;
  }
  auto fut = mean_all(mul(square(sub(future, next_frame)), available));

  r.total = add(add(seg, scale(cls, static_cast<T>(options.lambda1))),
                add(sub_loss, scale(fut, static_cast<T>(options.lambda2))));
  r.seg = seg.item();
  r.cls = cls.item();
  r.sub = sub_loss.item();
  r.fut = fut.item();
  r.total_value = r.total.item();
  return r;
}

}  // namespace sbnet
