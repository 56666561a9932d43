#pragma once

// Run configuration: presets, flat `key = value` files and per-key overrides.

#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbnet/data.hpp"
#include "sbnet/model.hpp"

namespace sbnet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string preset = "desk";
  ModelConfig model = ModelConfig::desk();

  std::size_t batch_size = 8;
  std::size_t epochs = 12;
  double lr = 1e-3;
  std::vector<int> lr_drop_epochs = {8, 10};
  double weight_decay = 3e-5;
  double label_smoothing = 0.1;
  double lambda_ctm = 0.5;
  double lambda1 = 0.2;
  double lambda2 = 0.2;
  std::uint64_t seed = 42;
  std::size_t frames_per_track_sample = 8;
  bool sub_loss_mixed_sign = false;
  bool seg_loss_positive_only = false;

  // Synthetic corpus.
  std::size_t synth_tracks = 300;
  std::size_t synth_frames = 10;
  std::size_t synth_distractors = 2;
  double p_noise = 0.1;
  double train_fraction = 0.8;

  // Paths. Relative frame paths in a tracks file resolve against `frames`.
  std::string tracks = "tracks.json";
  std::string frames = ".";
  std::string lexicon;
  std::string vocab = "vocab.txt";
  std::string checkpoint = "model.sbnt";
  std::string queries = "queries.json";
  std::string ground_truth = "ground_truth.json";
  std::string output = "out";

  static RunConfig desk() { return {}; }

  static RunConfig full() {
    RunConfig c;
    c.preset = "full";
    c.model = ModelConfig::full();
    c.batch_size = 64;
    c.epochs = 10;
    c.lr = 3e-5;
    c.lr_drop_epochs = {5, 8};
    return c;
  }

  static RunConfig from_preset(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "full") return full();
    throw ConfigError("unknown preset '" + name + "' (expected desk or full)");
  }

  LossOptions loss_options() const {
    LossOptions o;
    o.lambda1 = lambda1;
    o.lambda2 = lambda2;
    o.label_smoothing = label_smoothing;
    o.seg = seg_loss_positive_only ? SegLossMode::kPositiveOnly : SegLossMode::kTwoTerm;
    o.sub = sub_loss_mixed_sign ? SubLossMode::kMixedSign : SubLossMode::kCorrected;
    return o;
  }

  SynthConfig synth_config() const {
    SynthConfig s;
    s.seed = seed;
    s.num_tracks = synth_tracks;
    s.frames_per_track = synth_frames;
    s.image_size = model.encoder.image_size;
    s.distractors = synth_distractors;
    s.p_noise = p_noise;
    return s;
  }

  /// Sets one field from its textual form. `preset` resets every field.
  void set(const std::string& key, const std::string& value) {
    if (key == "preset") {
      *this = from_preset(value);
      return;
    }
    const auto& table = fields();
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->second.set(*this, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("bad value '" + value + "' for '" + key + "'");
    }
  }

  std::string get(const std::string& key) const {
    if (key == "preset") return preset;
    const auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second.get(*this);
  }

  static std::vector<std::string> keys() {
    std::vector<std::string> out{"preset"};
    for (const auto& [k, f] : fields()) out.push_back(k);
    return out;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    for (double w : {weight_decay, label_smoothing, lambda_ctm, lambda1, lambda2}) {
      if (w < 0) throw ConfigError("weights must be nonnegative");
    }
    if (label_smoothing >= 1) throw ConfigError("label_smoothing must be below 1");
    if (frames_per_track_sample < 1) throw ConfigError("frames_per_track_sample must be at least 1");
    try {
      model.encoder.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }

  /// `key = value` lines, one per field, sorted by key after `preset`.
  std::string to_text() const {
    std::string out;
    for (const auto& k : keys()) out += k + " = " + get(k) + "\n";
    return out;
  }

  /// Applies a flat config file on top of the current values. A `preset`
  /// line is honoured first wherever it appears.
  void apply_text(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> entries;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      const auto trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
      entries.emplace_back(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
    for (const auto& [k, v] : entries) {
      if (k == "preset") set(k, v);
    }
    for (const auto& [k, v] : entries) {
      if (k != "preset") set(k, v);
    }
  }

  static RunConfig load(const std::string& path) {
    RunConfig c;
    c.apply_text(read_text_file(path));
    return c;
  }

 private:
  struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
  };

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
  }

  static std::string format(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
  }

  static std::size_t parse_size(const std::string& v) {
    if (v.empty() || v[0] == '-') throw ConfigError("expected a nonnegative integer, got '" + v + "'");
    std::size_t pos = 0;
    const auto out = std::stoull(v, &pos);
    if (pos != v.size()) throw ConfigError("expected an integer, got '" + v + "'");
    return out;
  }

  static double parse_double(const std::string& v) {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw ConfigError("expected a number, got '" + v + "'");
    return out;
  }

  static bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("expected true or false, got '" + v + "'");
  }

  static const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = [] {
      std::map<std::string, Field> t;
      auto size_field = [&t](const std::string& key, std::size_t RunConfig::*member) {
        t[key] = {[member](RunConfig& c, const std::string& v) { c.*member = parse_size(v); },
                  [member](const RunConfig& c) { return std::to_string(c.*member); }};
      };
      auto encoder_field = [&t](const std::string& key, std::size_t EncoderConfig::*member) {
        t[key] = {[member](RunConfig& c, const std::string& v) { c.model.encoder.*member = parse_size(v); },
                  [member](const RunConfig& c) { return std::to_string(c.model.encoder.*member); }};
      };
      auto model_field = [&t](const std::string& key, std::size_t ModelConfig::*member) {
        t[key] = {[member](RunConfig& c, const std::string& v) { c.model.*member = parse_size(v); },
                  [member](const RunConfig& c) { return std::to_string(c.model.*member); }};
      };
      auto double_field = [&t](const std::string& key, double RunConfig::*member) {
        t[key] = {[member](RunConfig& c, const std::string& v) { c.*member = parse_double(v); },
                  [member](const RunConfig& c) { return format(c.*member); }};
      };
      auto bool_field = [&t](const std::string& key, bool RunConfig::*member) {
        t[key] = {[member](RunConfig& c, const std::string& v) { c.*member = parse_bool(v); },
                  [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
      };
      auto string_field = [&t](const std::string& key, std::string RunConfig::*member) {
        t[key] = {[member](RunConfig& c, const std::string& v) { c.*member = v; },
                  [member](const RunConfig& c) { return c.*member; }};
      };

      encoder_field("seq_len", &EncoderConfig::seq_len);
      encoder_field("text_width", &EncoderConfig::text_width);
      encoder_field("channels", &EncoderConfig::channels);
      encoder_field("d_model", &EncoderConfig::d_model);
      encoder_field("num_heads", &EncoderConfig::num_heads);
      encoder_field("num_layers", &EncoderConfig::num_layers);
      encoder_field("ffn_width", &EncoderConfig::ffn_width);
      encoder_field("image_size", &EncoderConfig::image_size);
      encoder_field("downsample_factor", &EncoderConfig::downsample_factor);
      encoder_field("image_stages", &EncoderConfig::image_stages);
      encoder_field("vocab_size", &EncoderConfig::vocab_size);
      model_field("mask_width", &ModelConfig::mask_width);
      model_field("classifier_hidden", &ModelConfig::classifier_hidden);
      model_field("gate_hidden", &ModelConfig::gate_hidden);
      size_field("batch_size", &RunConfig::batch_size);
      size_field("epochs", &RunConfig::epochs);
      size_field("frames_per_track_sample", &RunConfig::frames_per_track_sample);
      size_field("synth_tracks", &RunConfig::synth_tracks);
      size_field("synth_frames", &RunConfig::synth_frames);
      size_field("synth_distractors", &RunConfig::synth_distractors);
      double_field("lr", &RunConfig::lr);
      double_field("weight_decay", &RunConfig::weight_decay);
      double_field("label_smoothing", &RunConfig::label_smoothing);
      double_field("lambda_ctm", &RunConfig::lambda_ctm);
      double_field("lambda1", &RunConfig::lambda1);
      double_field("lambda2", &RunConfig::lambda2);
      double_field("p_noise", &RunConfig::p_noise);
      double_field("train_fraction", &RunConfig::train_fraction);
      bool_field("sub_loss_mixed_sign", &RunConfig::sub_loss_mixed_sign);
      bool_field("seg_loss_positive_only", &RunConfig::seg_loss_positive_only);
      string_field("tracks", &RunConfig::tracks);
      string_field("frames", &RunConfig::frames);
      string_field("lexicon", &RunConfig::lexicon);
      string_field("vocab", &RunConfig::vocab);
      string_field("checkpoint", &RunConfig::checkpoint);
      string_field("queries", &RunConfig::queries);
      string_field("ground_truth", &RunConfig::ground_truth);
      string_field("output", &RunConfig::output);
      t["seed"] = {[](RunConfig& c, const std::string& v) { c.seed = parse_size(v); },
                   [](const RunConfig& c) { return std::to_string(c.seed); }};
      t["lr_drop_epochs"] = {[](RunConfig& c, const std::string& v) {
                               c.lr_drop_epochs.clear();
                               std::istringstream in(v);
                               std::string item;
                               while (std::getline(in, item, ',')) {
                                 item = trim(item);
                                 if (!item.empty()) c.lr_drop_epochs.push_back(static_cast<int>(parse_size(item)));
                               }
                             },
                             [](const RunConfig& c) {
                               std::string out;
                               for (std::size_t i = 0; i < c.lr_drop_epochs.size(); ++i) {
                                 out += (i ? "," : "") + std::to_string(c.lr_drop_epochs[i]);
                               }
                               return out;
                             }};
      return t;
    }();
    return table;
  }
};

}  // namespace sbnet
