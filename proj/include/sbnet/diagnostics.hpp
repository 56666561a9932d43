#pragma once

// Gradient checks over each module chain of the network, in double
// precision against central finite differences.

#include <functional>
#include <iomanip>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "sbnet/gradcheck.hpp"
#include "sbnet/model.hpp"

namespace sbnet {

struct GradCheckModule {
  std::string name;
  std::function<GradCheckReport()> run;
};

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-3;
  std::size_t coords_per_tensor = 6;
  std::size_t batch = 2;
  std::uint64_t seed = 7;
};

namespace detail {

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(shape);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline std::vector<TokenSeq> random_tokens(std::size_t n, const EncoderConfig& e, std::mt19937_64& rng) {
  std::vector<TokenSeq> out;
  std::uniform_int_distribution<std::int64_t> id(Vocab::kReserved, static_cast<std::int64_t>(e.vocab_size) - 1);
  for (std::size_t b = 0; b < n; ++b) {
    TokenSeq s;
    s.ids.assign(e.seq_len, Vocab::kPad);
    s.mask.assign(e.seq_len, 0);
    const std::size_t used = e.seq_len - b;  // later samples get trailing padding
    for (std::size_t i = 0; i < used; ++i) {
      s.ids[i] = i == 0 ? Vocab::kCls : id(rng);
      s.mask[i] = 1;
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline Tensor<double> random_boxes(std::size_t n, std::size_t fs) {
  Tensor<double> b({n, 1, fs, fs});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t y = fs / 4 + i; y < fs / 2 + i + 1; ++y) {
      for (std::size_t x = fs / 3; x < fs / 3 + 2 + i; ++x) b[(i * fs + y) * fs + x] = 1;
    }
  }
  return b;
}

inline ParamList<double> as_inputs(std::initializer_list<std::pair<const char*, Tensor<double>>> items) {
  ParamList<double> out;
  for (const auto& [name, t] : items) {
    Tensor<double> copy = t;
    copy.set_requires_grad();
    out.push_back({name, copy});
  }
  return out;
}

inline ParamList<double> with_prefix(const ParamList<double>& params, const std::string& prefix) {
  ParamList<double> out;
  for (const auto& p : params) {
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p);
  }
  return out;
}

}  // namespace detail

/// The four module chains: encoders, aux-heads, fusion, losses. Each chain's
/// outputs are reduced to a scalar by a mean against fixed random weights, the
/// same reduction the training losses use.
inline std::vector<GradCheckModule> default_gradcheck_modules(const ModelConfig& config,
                                                              const GradCheckOptions& options = {}) {
  auto model = std::make_shared<SBNet<double>>(config, options.seed);
  const auto& e = config.encoder;
  const std::size_t n = options.batch, fs = e.feature_size(), c = e.channels;
  std::vector<GradCheckModule> modules;

  modules.push_back({"encoders", [=]() {
    std::mt19937_64 rng(options.seed + 1);
    const auto tokens = detail::random_tokens(n, e, rng);
    const auto images = detail::random_tensor({n, 3, e.image_size, e.image_size}, rng, 0, 1);
    const auto r_text = detail::random_tensor({n, e.seq_len, e.text_width}, rng);
    const auto r_image = detail::random_tensor({n, c, fs, fs}, rng);
    auto params = detail::with_prefix(model->parameters(), "text.");
    for (auto& p : detail::with_prefix(model->parameters(), "image.")) params.push_back(p);
    auto f = [&]() {
      auto text = model->encode_text(tokens);
      auto image = model->encode_image(images, true);
      return add(mean_all(mul(text.tokens, r_text)), mean_all(mul(image.map, r_image)));
    };
    return grad_check_closure<double>(f, params, options.step, options.coords_per_tensor, options.seed);
  }});

  modules.push_back({"aux-heads", [=]() {
    std::mt19937_64 rng(options.seed + 2);
    auto inputs = detail::as_inputs({{"FN", detail::random_tensor({n, e.seq_len, e.text_width}, rng)},
                                     {"FN_cls", detail::random_tensor({n, e.text_width}, rng)},
                                     {"FI", detail::random_tensor({n, c, fs, fs}, rng)}});
    const auto boxes = detail::random_boxes(n, fs);
    std::mt19937_64 probe_rng(options.seed + 3);
    const auto r_tc = detail::random_tensor({n, config.num_colors}, probe_rng);
    const auto r_tt = detail::random_tensor({n, config.num_types}, probe_rng);
    const auto r_ic = detail::random_tensor({n, config.num_colors}, probe_rng);
    const auto r_it = detail::random_tensor({n, config.num_types}, probe_rng);
    const auto r_ig = detail::random_tensor({n, c}, probe_rng);
    const auto r_tg = detail::random_tensor({n, e.text_width}, probe_rng);
    const auto r_u = detail::random_tensor({n, 3, fs, fs}, probe_rng);
    auto params = inputs;
    for (const char* prefix : {"cls_text.", "cls_img.", "subst.", "future."}) {
      for (auto& p : detail::with_prefix(model->parameters(), prefix)) params.push_back(p);
    }
    auto f = [&]() {
      const auto& fn = inputs[0].tensor;
      const auto& cls = inputs[1].tensor;
      const auto& fi = inputs[2].tensor;
      auto [tc, tt] = model->text_classifier()(cls);
      auto img = model->image_classifier()(fi, boxes);
      auto bundle = model->substitution()(fn, fi, boxes);
      auto u = model->future_head()(fi);
      Tensor<double> total = add(mean_all(mul(tc, r_tc)), mean_all(mul(tt, r_tt)));
      total = add(total, add(mean_all(mul(img.color, r_ic)), mean_all(mul(img.type, r_it))));
      total = add(total, add(mean_all(mul(bundle.image_generated, r_ig)), mean_all(mul(bundle.text_generated, r_tg))));
      return add(total, mean_all(mul(u, r_u)));
    };
    return grad_check_closure<double>(f, params, options.step, options.coords_per_tensor, options.seed);
  }});

  modules.push_back({"fusion", [=]() {
    std::mt19937_64 rng(options.seed + 4);
    auto inputs = detail::as_inputs({{"FN", detail::random_tensor({n, e.seq_len, e.text_width}, rng)},
                                     {"FI", detail::random_tensor({n, c, fs, fs}, rng)}});
    const auto r_mask = detail::random_tensor({n, 1, fs, fs}, rng);
    auto params = inputs;
    for (auto& p : detail::with_prefix(model->parameters(), "fuse.")) params.push_back(p);
    auto f = [&]() {
      auto mask = model->predict_mask(inputs[0].tensor, inputs[1].tensor, true);
      return mean_all(mul(mask, r_mask));
    };
    return grad_check_closure<double>(f, params, options.step, options.coords_per_tensor, options.seed);
  }});

  modules.push_back({"losses", [=]() {
    std::mt19937_64 rng(options.seed + 5);
    auto inputs = detail::as_inputs({{"mask_logits", detail::random_tensor({n, 1, fs, fs}, rng, -2, 2)},
                                     {"C_n", detail::random_tensor({n, config.num_colors}, rng)},
                                     {"T_n", detail::random_tensor({n, config.num_types}, rng)},
                                     {"C_i", detail::random_tensor({n, config.num_colors}, rng)},
                                     {"T_i", detail::random_tensor({n, config.num_types}, rng)},
                                     {"FI_g", detail::random_tensor({n, c}, rng)},
                                     {"FN_g", detail::random_tensor({n, e.text_width}, rng)},
                                     {"U", detail::random_tensor({n, 3, fs, fs}, rng)}});
    // FI_gt and FN_gt enter the loss detached, so they are constants here.
    const auto image_target = detail::random_tensor({n, c}, rng);
    const auto text_target = detail::random_tensor({n, e.text_width}, rng);
    const auto boxes = detail::random_boxes(n, fs);
    const auto next = detail::random_tensor({n, 3, fs, fs}, rng, 0, 1);
    LossTargets targets;
    for (std::size_t i = 0; i < n; ++i) {
      targets.colors.push_back(static_cast<std::int64_t>(i % config.num_colors));
      targets.types.push_back(static_cast<std::int64_t>((i + 3) % config.num_types));
      targets.has_next.push_back(i + 1 < n || n == 1);
    }
    auto f = [&]() {
      auto mask = sigmoid(inputs[0].tensor);
      ClassLogits<double> logits{inputs[1].tensor, inputs[2].tensor, inputs[3].tensor, inputs[4].tensor};
      SubstitutionBundle<double> bundle{image_target, text_target, inputs[5].tensor, inputs[6].tensor};
      return compute_losses(mask, boxes, logits, targets, bundle, inputs[7].tensor, next, LossOptions{}).total;
    };
    return grad_check_closure<double>(f, inputs, options.step, options.coords_per_tensor, options.seed);
  }});
  return modules;
}

/// Prints one line per module; returns 0 when every module is under the
/// tolerance and 1 otherwise.
inline int run_gradcheck(const std::vector<GradCheckModule>& modules, std::ostream& out, double tolerance = 1e-3) {
  int status = 0;
  for (const auto& m : modules) {
    const auto report = m.run();
    const bool ok = report.max_relative_error < tolerance;
    if (!ok) status = 1;
    out << std::left << std::setw(10) << m.name << " max_rel_err " << std::scientific << std::setprecision(3)
        << report.max_relative_error << std::defaultfloat << " over " << report.coordinates << " coords"
        << (ok ? "  ok" : "  FAIL (worst " + report.worst + ")") << "\n";
  }
  return status;
}

}  // namespace sbnet
