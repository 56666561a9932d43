#pragma once

// Training loop, track-level retrieval and the file-level runners behind
// the command-line tool.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbnet/config.hpp"
#include "sbnet/data.hpp"
#include "sbnet/metrics.hpp"
#include "sbnet/model.hpp"
#include "sbnet/optim.hpp"

namespace sbnet {

/// A track after query denoising: rewritten descriptions and voted attributes.
struct PreparedTrack {
  const Track* track = nullptr;
  std::array<std::string, 3> nl;
  TrackAttributes attributes;
};

inline std::vector<PreparedTrack> prepare_tracks(const std::vector<Track>& tracks, const AttributeLexicon& lexicon) {
  std::vector<PreparedTrack> out;
  for (const auto& t : tracks) {
    auto d = denoise_queries(t.nl, lexicon);
    out.push_back({&t, d.rewritten, d.attributes});
  }
  return out;
}

/// Vocabulary over the (denoised) training descriptions plus every lexicon
/// word, so synonyms unseen in training still get their own ids.
inline Vocab build_vocab(const std::vector<PreparedTrack>& tracks, const AttributeLexicon& lexicon) {
  std::vector<std::string> texts;
  for (const auto& t : tracks) texts.insert(texts.end(), t.nl.begin(), t.nl.end());
  for (auto family : {AttributeFamily::kColor, AttributeFamily::kType}) {
    for (const auto& e : lexicon.entries(family)) {
      for (const auto& p : e.phrases) texts.push_back(detail::phrase_text(p));
    }
  }
  return Vocab::build(texts);
}

/// Up to `count` frame indices spread evenly from first to last.
inline std::vector<std::size_t> sample_frame_indices(std::size_t frames, std::size_t count) {
  std::vector<std::size_t> out;
  if (frames == 0 || count == 0) return out;
  if (frames <= count) {
    for (std::size_t i = 0; i < frames; ++i) out.push_back(i);
    return out;
  }
  if (count == 1) return {frames / 2};
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(static_cast<std::size_t>(std::llround(static_cast<double>(i) * (frames - 1) / (count - 1))));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double lr = 0;
  double total = 0, seg = 0, cls = 0, sub = 0, fut = 0;
};

inline std::string csv_header() { return "epoch,lr,loss_total,loss_seg,loss_cls,loss_sub,loss_fut\n"; }

inline std::string csv_row(const EpochStats& s) {
  std::ostringstream out;
  out << s.epoch << ',' << std::setprecision(9) << s.lr << ',' << s.total << ',' << s.seg << ',' << s.cls << ','
      << s.sub << ',' << s.fut << '\n';
  return out.str();
}

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Batch {
  std::vector<TokenSeq> tokens;
  Tensor<T> images;  // (N, 3, S, S)
  Tensor<T> boxes;   // (N, 1, h, w)
  Tensor<T> next;    // (N, 3, h, w)
  LossTargets targets;
  std::vector<std::string> track_ids;
};

/// Draws one (frame, description) pair per listed track and assembles the
/// training tensors.
template <typename T>
Batch<T> make_batch(const std::vector<const PreparedTrack*>& tracks, const FrameSource& frames, const Vocab& vocab,
                    const ModelConfig& config, std::mt19937_64& rng) {
  const auto& enc = config.encoder;
  const std::size_t n = tracks.size(), s = enc.image_size, fs = enc.feature_size();
  Batch<T> b;
  b.images = Tensor<T>({n, 3, s, s});
  b.boxes = Tensor<T>({n, 1, fs, fs});
  b.next = Tensor<T>({n, 3, fs, fs});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pt = *tracks[i];
    const Track& t = *pt.track;
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, 2)(rng);
    const std::size_t f = std::uniform_int_distribution<std::size_t>(0, t.frames.size() - 1)(rng);
    b.tokens.push_back(tokenize(pt.nl[k], vocab, enc.seq_len));
    b.track_ids.push_back(t.track_id);
    b.targets.colors.push_back(pt.attributes.color_id);
    b.targets.types.push_back(pt.attributes.type_id);

    const auto prepared = preprocess(to_planar(frames.load(t.frames[f])), t.boxes[f], s, true, &rng);
    std::copy(prepared.image.values.begin(), prepared.image.values.end(), b.images.data().begin() + i * 3 * s * s);
    const auto masks = render_box_mask(prepared.box.area() > 0 ? prepared.box : Box{0, 0, 1, 1}, s, fs);
    std::copy(masks.feature.begin(), masks.feature.end(), b.boxes.data().begin() + i * fs * fs);

    const bool has_next = f + 1 < t.frames.size();
    b.targets.has_next.push_back(has_next);
    if (has_next) {
      auto next = resize_bilinear(to_planar(frames.load(t.frames[f + 1])), s, s);
      next = resize_bilinear(translate(next, prepared.dx, prepared.dy), fs, fs);
      std::copy(next.values.begin(), next.values.end(), b.next.data().begin() + i * 3 * fs * fs);
    }
  }
  return b;
}

struct TrainOptions {
  std::string checkpoint_dir;  // empty: no per-epoch checkpoints
  std::string csv_path;        // empty: no CSV
  bool verbose = true;
};

/// Sequential Adam loop; one sample per track per epoch.
template <typename T>
std::vector<EpochStats> train(SBNet<T>& model, const std::vector<PreparedTrack>& tracks, const FrameSource& frames,
                              const Vocab& vocab, const RunConfig& config, const TrainOptions& options = {}) {
  config.validate();
  if (tracks.empty()) throw std::invalid_argument("train: no training tracks");
  if (vocab.size() > config.model.encoder.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " entries but vocab_size is " +
                      std::to_string(config.model.encoder.vocab_size));
  }
  AdamOptions adam_options;
  adam_options.lr = config.lr;
  adam_options.weight_decay = config.weight_decay;
  Adam<T> adam(model.parameters(), adam_options);
  const auto loss_options = config.loss_options();
  std::mt19937_64 rng(config.seed ^ 0x5eedf00dULL);

  if (!options.csv_path.empty()) write_text_file(options.csv_path, csv_header());
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  std::vector<EpochStats> history;
  std::vector<std::size_t> order(tracks.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.lr = step_decay_lr(config.lr, config.lr_drop_epochs, static_cast<int>(epoch));
    adam.set_lr(stats.lr);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);

    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::vector<const PreparedTrack*> members;
      for (std::size_t j = start; j < std::min(order.size(), start + config.batch_size); ++j) {
        members.push_back(&tracks[order[j]]);
      }
      auto batch = make_batch<T>(members, frames, vocab, model.config(), rng);
      Tape<T> tape;
      LossReport<T> report;
      {
        TapeScope<T> scope(tape);
        auto r = model.forward(batch.tokens, batch.images, batch.boxes, true);
        report = compute_losses(r.mask, batch.boxes, r.logits, batch.targets, r.bundle, r.future, batch.next,
                                loss_options);
      }
      if (!std::isfinite(report.total_value)) {
        std::string ids;
        for (const auto& id : batch.track_ids) ids += (ids.empty() ? "" : ", ") + id;
        throw NonFiniteLoss("non-finite loss in epoch " + std::to_string(epoch + 1) + " for tracks: " + ids);
      }
      backward(report.total, tape);
      adam.step();
      stats.total += report.total_value;
      stats.seg += report.seg;
      stats.cls += report.cls;
      stats.sub += report.sub;
      stats.fut += report.fut;
      ++batches;
    }
    for (double* v : {&stats.total, &stats.seg, &stats.cls, &stats.sub, &stats.fut}) *v /= static_cast<double>(batches);
    history.push_back(stats);

    if (!options.csv_path.empty()) {
      std::ofstream(options.csv_path, std::ios::app | std::ios::binary) << csv_row(stats);
    }
    if (!options.checkpoint_dir.empty()) {
      std::ostringstream name;
      name << "epoch_" << std::setw(3) << std::setfill('0') << stats.epoch << ".sbnt";
      model.save((std::filesystem::path(options.checkpoint_dir) / name.str()).string());
    }
    if (options.verbose) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      std::clog << "epoch " << stats.epoch << " lr " << stats.lr << " loss " << stats.total << " (seg " << stats.seg
                << ", cls " << stats.cls << ", sub " << stats.sub << ", fut " << stats.fut << ") " << std::fixed
                << std::setprecision(1) << secs << "s" << std::defaultfloat << std::setprecision(6) << "\n";
    }
  }
  return history;
}

// ---------------------------------------------------------------------------
// Retrieval

struct PairScore {
  std::string query;
  std::string track;
  MatchScore mean;  // component-wise average over descriptions and frames
};

struct RetrievalResult {
  Ranking ranking;
  std::vector<PairScore> scores;  // query-major, candidates in input order
};

/// Sorts by descending score, ties by ascending track id.
inline std::vector<std::string> rank_tracks(std::vector<std::pair<std::string, double>> scored) {
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> out;
  for (auto& [id, s] : scored) out.push_back(std::move(id));
  return out;
}

/// Scores every (query, candidate) pair: Prob averaged over the query's
/// three descriptions and up to `frames_per_track_sample` frames per track.
template <typename T>
RetrievalResult retrieve(const SBNet<T>& model, const Vocab& vocab, const AttributeLexicon& lexicon,
                         const Queries& queries, const std::vector<Track>& candidates, const FrameSource& frames,
                         const RunConfig& config) {
  if (candidates.empty()) throw std::invalid_argument("retrieve: empty candidate set");
  const auto& enc = model.config().encoder;
  const std::size_t s = enc.image_size, fs = enc.feature_size();

  // Frame side: one cache entry per sampled (frame, box).
  std::vector<FrameCache<T>> cache;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // per candidate: [begin, end)
  constexpr std::size_t kChunk = 32;
  std::vector<std::pair<PlanarImage, Box>> pending;
  auto flush = [&]() {
    if (pending.empty()) return;
    const std::size_t n = pending.size();
    Tensor<T> images({n, 3, s, s}), boxes({n, 1, fs, fs});
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(pending[i].first.values.begin(), pending[i].first.values.end(), images.data().begin() + i * 3 * s * s);
      const auto m = render_box_mask(pending[i].second, s, fs);
      std::copy(m.feature.begin(), m.feature.end(), boxes.data().begin() + i * fs * fs);
    }
    for (auto& c : model.cache_frames(images, boxes)) cache.push_back(std::move(c));
    pending.clear();
  };
  for (const auto& t : candidates) {
    const std::size_t begin = cache.size() + pending.size();
    for (std::size_t f : sample_frame_indices(t.frames.size(), config.frames_per_track_sample)) {
      auto p = preprocess(to_planar(frames.load(t.frames[f])), t.boxes[f], s, false);
      pending.emplace_back(std::move(p.image), p.box);
      if (pending.size() == kChunk) flush();
    }
    spans.emplace_back(begin, cache.size() + pending.size());
  }
  flush();

  std::vector<const FrameCache<T>*> all;
  for (const auto& c : cache) all.push_back(&c);

  RetrievalResult result;
  for (const auto& [query_id, nl] : queries) {
    const auto denoised = denoise_queries(nl, lexicon);
    std::vector<MatchScore> totals(candidates.size());
    for (const auto& description : denoised.rewritten) {
      const auto text = model.cache_text(tokenize(description, vocab, enc.seq_len), denoised.attributes.color_id,
                                         denoised.attributes.type_id);
      std::vector<MatchScore> per_frame;
      for (std::size_t start = 0; start < all.size(); start += 256) {
        const std::vector<const FrameCache<T>*> chunk(all.begin() + start,
                                                      all.begin() + std::min(all.size(), start + 256));
        for (const auto& m : model.score(text, chunk, config.lambda_ctm)) per_frame.push_back(m);
      }
      for (std::size_t c = 0; c < candidates.size(); ++c) {
        const auto [b, e] = spans[c];
        for (std::size_t i = b; i < e; ++i) {
          const double w = 1.0 / (3.0 * static_cast<double>(e - b));
          totals[c].mpr += per_frame[i].mpr * w;
          totals[c].ss += per_frame[i].ss * w;
          totals[c].ctm += per_frame[i].ctm * w;
          totals[c].prob += per_frame[i].prob * w;
        }
      }
    }
    std::vector<std::pair<std::string, double>> scored;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      totals[c].lambda_ctm = config.lambda_ctm;
      scored.emplace_back(candidates[c].track_id, totals[c].prob);
      result.scores.push_back({query_id, candidates[c].track_id, totals[c]});
    }
    result.ranking[query_id] = rank_tracks(std::move(scored));
  }
  return result;
}

inline void save_ranking(const std::string& path, const Ranking& ranking) {
  write_text_file(path, nlohmann::json(ranking).dump(2) + "\n");
}

inline Ranking load_ranking(const std::string& path) {
  return parse_json(read_text_file(path), path).get<Ranking>();
}

inline std::string scores_csv(const std::vector<PairScore>& scores) {
  std::ostringstream out;
  out << "query_id,track_id,prob,mpr,ss,ctm\n" << std::setprecision(9);
  for (const auto& p : scores) {
    out << p.query << ',' << p.track << ',' << p.mean.prob << ',' << p.mean.mpr << ',' << p.mean.ss << ','
        << p.mean.ctm << '\n';
  }
  return out.str();
}

inline std::string metrics_csv(const RetrievalMetrics& m) {
  std::ostringstream out;
  out << "metric,value\n" << std::setprecision(9) << "mrr," << m.mrr << '\n';
  for (const auto& [k, r] : m.recall) out << "recall@" << k << ',' << r << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// File-level runners

inline AttributeLexicon load_lexicon(const RunConfig& config) {
  if (config.lexicon.empty()) return AttributeLexicon::standard();
  return AttributeLexicon::parse(read_text_file(config.lexicon));
}

inline std::string under(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

/// Writes a synthetic corpus: frames/, tracks.json, train/test splits,
/// test queries with ground truth, lexicon.txt and per-track generating
/// attributes.
inline void run_synth(const RunConfig& config) {
  config.validate();
  const auto lexicon = load_lexicon(config);
  const auto corpus = generate_synthetic(config.synth_config(), lexicon);
  std::filesystem::create_directories(config.output);
  for (const auto& [path, image] : corpus.frames) {
    const auto full = std::filesystem::path(config.output) / path;
    std::filesystem::create_directories(full.parent_path());
    write_png(full.string(), image);
  }
  save_tracks(under(config.output, "tracks.json"), corpus.tracks);
  const auto [train_set, test_set] = split_tracks(corpus.tracks, config.seed, config.train_fraction);
  save_tracks(under(config.output, "train_tracks.json"), train_set);
  save_tracks(under(config.output, "test_tracks.json"), test_set);
  const auto [queries, truth] = queries_from_tracks(test_set);
  save_queries(under(config.output, "queries.json"), queries);
  save_ground_truth(under(config.output, "ground_truth.json"), truth);
  write_text_file(under(config.output, "lexicon.txt"), lexicon.to_text());

  nlohmann::json attrs = nlohmann::json::object();
  for (std::size_t i = 0; i < corpus.tracks.size(); ++i) {
    const auto& t = corpus.truth[i];
    attrs[corpus.tracks[i].track_id] = {{"color", lexicon.color_name(t.color)},
                                        {"type", lexicon.type_name(t.type)},
                                        {"motion", motion_name(t.motion)},
                                        {"noised_description", t.noised_description}};
  }
  write_text_file(under(config.output, "synth_attributes.json"), attrs.dump(2) + "\n");
  std::clog << "wrote " << corpus.tracks.size() << " tracks (" << train_set.size() << " train, " << test_set.size()
            << " test) to " << config.output << "\n";
}

/// Trains on `config.tracks`; writes vocab.txt, metrics.csv, per-epoch
/// checkpoints and the final model.sbnt under `config.output`.
inline std::vector<EpochStats> run_train(const RunConfig& config) {
  config.validate();
  const auto lexicon = load_lexicon(config);
  const auto tracks = load_tracks(config.tracks);
  const auto prepared = prepare_tracks(tracks, lexicon);
  const auto vocab = build_vocab(prepared, lexicon);
  std::filesystem::create_directories(config.output);
  write_text_file(under(config.output, "vocab.txt"), vocab.to_text());
  write_text_file(under(config.output, "config.txt"), config.to_text());
  SBNet<float> model(config.model, config.seed);
  TrainOptions options;
  options.checkpoint_dir = under(config.output, "checkpoints");
  options.csv_path = under(config.output, "metrics.csv");
  auto history = train(model, prepared, FrameSource(config.frames), vocab, config, options);
  model.save(under(config.output, "model.sbnt"));
  return history;
}

/// Ranks `config.tracks` for every query in `config.queries`; writes
/// results.json and scores.csv under `config.output`.
inline RetrievalResult run_retrieve(const RunConfig& config) {
  config.validate();
  const auto lexicon = load_lexicon(config);
  const auto vocab = Vocab::from_text(read_text_file(config.vocab));
  SBNet<float> model(config.model, config.seed);
  model.load(config.checkpoint);
  const auto candidates = load_tracks(config.tracks);
  const auto queries = load_queries(config.queries);
  auto result = retrieve(model, vocab, lexicon, queries, candidates, FrameSource(config.frames), config);
  std::filesystem::create_directories(config.output);
  save_ranking(under(config.output, "results.json"), result.ranking);
  write_text_file(under(config.output, "scores.csv"), scores_csv(result.scores));
  return result;
}

/// Reads `<output>/results.json` and `config.ground_truth`; writes eval.csv.
inline RetrievalMetrics run_evaluate(const RunConfig& config, const std::vector<std::size_t>& ks = {1, 5, 10}) {
  const auto ranking = load_ranking(under(config.output, "results.json"));
  const auto truth = load_ground_truth(config.ground_truth);
  const auto metrics = evaluate_ranking(ranking, truth, ks);
  write_text_file(under(config.output, "eval.csv"), metrics_csv(metrics));
  return metrics;
}

/// Predicted masks for each track's first description on its sampled
/// frames, written as grayscale PNGs under `<output>/masks`.
inline std::size_t run_dump_masks(const RunConfig& config) {
  config.validate();
  const auto lexicon = load_lexicon(config);
  const auto vocab = Vocab::from_text(read_text_file(config.vocab));
  SBNet<float> model(config.model, config.seed);
  model.load(config.checkpoint);
  const auto tracks = load_tracks(config.tracks);
  const FrameSource frames(config.frames);
  const auto& enc = config.model.encoder;
  const std::size_t s = enc.image_size, fs = enc.feature_size();
  const auto dir = under(config.output, "masks");
  std::filesystem::create_directories(dir);
  std::size_t written = 0;
  NoTapeScope<float> off;
  for (const auto& t : tracks) {
    const auto denoised = denoise_queries(t.nl, lexicon);
    const auto text = model.encode_text({tokenize(denoised.rewritten[0], vocab, enc.seq_len)});
    for (std::size_t f : sample_frame_indices(t.frames.size(), config.frames_per_track_sample)) {
      const auto p = preprocess(to_planar(frames.load(t.frames[f])), t.boxes[f], s, false);
      const auto image = model.encode_image(reshape(to_tensor<float>(p.image), {1, 3, s, s}), false);
      const auto mask = model.predict_mask(text.tokens, image.map, false);
      PlanarImage low{fs, fs, std::vector<float>(mask.data().begin(), mask.data().end())};
      const auto up = resize_bilinear(low, s, s);
      std::ostringstream name;
      name << t.track_id << "_" << std::setw(3) << std::setfill('0') << f << ".png";
      write_gray_png(under(dir, name.str()), up.values, s, s);
      ++written;
    }
  }
  return written;
}

}  // namespace sbnet
