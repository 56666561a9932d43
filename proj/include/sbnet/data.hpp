#pragma once

// Track files, box rasterisation, preprocessing and the synthetic scene
// generator that stands in for real traffic-camera data.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "sbnet/image.hpp"
#include "sbnet/text.hpp"

namespace sbnet {

struct Box {
  long x = 0, y = 0, w = 0, h = 0;
  long area() const { return w * h; }
  bool operator==(const Box&) const = default;
};

struct Track {
  std::string track_id;
  std::vector<std::string> frames;
  std::vector<Box> boxes;
  std::array<std::string, 3> nl;
  bool operator==(const Track&) const = default;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Track files

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
}

inline nlohmann::json parse_json(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(what + ": parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
}

/// Checks one track's schema rules. With a known frame size the boxes must
/// also fit inside it.
inline void validate_track(const Track& t, std::optional<std::pair<long, long>> frame_size = std::nullopt) {
  if (t.frames.empty()) throw DataError("track " + t.track_id + ": no frames");
  if (t.frames.size() != t.boxes.size()) {
    throw DataError("track " + t.track_id + ": " + std::to_string(t.frames.size()) + " frames but " +
                    std::to_string(t.boxes.size()) + " boxes");
  }
  for (std::size_t i = 0; i < t.boxes.size(); ++i) {
    const Box& b = t.boxes[i];
    bool ok = b.w > 0 && b.h > 0 && b.x >= 0 && b.y >= 0;
    if (frame_size) ok = ok && b.x + b.w <= frame_size->first && b.y + b.h <= frame_size->second;
    if (!ok) throw DataError("track " + t.track_id + ", frame " + std::to_string(i) + ": box out of bounds");
  }
}

inline std::vector<Track> tracks_from_json(const nlohmann::json& root,
                                           std::optional<std::pair<long, long>> frame_size = std::nullopt) {
  if (!root.is_object()) throw DataError("tracks: top level must be an object");
  std::vector<Track> out;
  for (const auto& [id, value] : root.items()) {
    Track t;
    t.track_id = id;
    try {
      for (const auto& f : value.at("frames")) t.frames.push_back(f.get<std::string>());
      for (const auto& b : value.at("boxes")) {
        if (!b.is_array() || b.size() != 4) throw DataError("box must be [x, y, w, h]");
        for (const auto& v : b) {
          if (!v.is_number_integer()) throw DataError("box coordinates must be integers");
        }
        t.boxes.push_back({b[0].get<long>(), b[1].get<long>(), b[2].get<long>(), b[3].get<long>()});
      }
      const auto& nl = value.at("nl");
      if (!nl.is_array() || nl.size() != 3) throw DataError("expected exactly 3 descriptions");
      for (std::size_t k = 0; k < 3; ++k) t.nl[k] = nl[k].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("track " + id + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("track " + id + ": " + e.what());
    }
    validate_track(t, frame_size);
    out.push_back(std::move(t));
  }
  return out;
}

inline nlohmann::json tracks_to_json(const std::vector<Track>& tracks) {
  nlohmann::json root = nlohmann::json::object();
  for (const auto& t : tracks) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : t.boxes) boxes.push_back({b.x, b.y, b.w, b.h});
    root[t.track_id] = {{"frames", t.frames}, {"boxes", boxes}, {"nl", t.nl}};
  }
  return root;
}

inline std::vector<Track> load_tracks(const std::string& path,
                                      std::optional<std::pair<long, long>> frame_size = std::nullopt) {
  return tracks_from_json(parse_json(read_text_file(path), path), frame_size);
}

/// Keys come out sorted, so a load/save cycle normalises key order only.
inline void save_tracks(const std::string& path, const std::vector<Track>& tracks) {
  write_text_file(path, tracks_to_json(tracks).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Box masks

struct BoxMasks {
  std::vector<float> full;     // g, H x W
  std::vector<float> feature;  // b, h* x w*
  std::size_t feature_size = 0;
};

/// Cell (i, j) is active when its centre, mapped back to pixels, falls inside
/// the box. A box too small to cover any centre activates the cell holding
/// its own centre.
inline BoxMasks render_box_mask(const Box& box, std::size_t image_size, std::size_t feature_size) {
  if (box.w <= 0 || box.h <= 0) throw DataError("degenerate box");
  BoxMasks m;
  m.feature_size = feature_size;
  m.full.assign(image_size * image_size, 0.0f);
  const long s = static_cast<long>(image_size);
  for (long y = std::max(0L, box.y); y < std::min(s, box.y + box.h); ++y) {
    for (long x = std::max(0L, box.x); x < std::min(s, box.x + box.w); ++x) m.full[y * s + x] = 1.0f;
  }
  m.feature.assign(feature_size * feature_size, 0.0f);
  const double cell = static_cast<double>(image_size) / feature_size;
  bool any = false;
  for (std::size_t i = 0; i < feature_size; ++i) {
    const double cy = (i + 0.5) * cell;
    if (cy < box.y || cy >= box.y + box.h) continue;
    for (std::size_t j = 0; j < feature_size; ++j) {
      const double cx = (j + 0.5) * cell;
      if (cx >= box.x && cx < box.x + box.w) {
        m.feature[i * feature_size + j] = 1.0f;
        any = true;
      }
    }
  }
  if (!any) {
    auto clamp_cell = [&](double v) {
      return std::min(feature_size - 1, static_cast<std::size_t>(std::max(0.0, std::floor(v / cell))));
    };
    m.feature[clamp_cell(box.y + box.h / 2.0) * feature_size + clamp_cell(box.x + box.w / 2.0)] = 1.0f;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Preprocessing

struct Prepared {
  PlanarImage image;
  Box box;
  long dx = 0, dy = 0;  // translation applied, in output pixels
};

inline Box scale_box(const Box& b, double sx, double sy, long size) {
  const long x0 = std::clamp(std::lround(b.x * sx), 0L, size - 1);
  const long y0 = std::clamp(std::lround(b.y * sy), 0L, size - 1);
  const long x1 = std::clamp(std::lround((b.x + b.w) * sx), x0 + 1, size);
  const long y1 = std::clamp(std::lround((b.y + b.h) * sy), y0 + 1, size);
  return {x0, y0, x1 - x0, y1 - y0};
}

/// Box shifted by (dx, dy) and clipped to a size x size frame; w or h may
/// become zero when the box leaves the frame.
inline Box translate_box(const Box& b, long dx, long dy, long size) {
  const long x0 = std::clamp(b.x + dx, 0L, size), x1 = std::clamp(b.x + b.w + dx, 0L, size);
  const long y0 = std::clamp(b.y + dy, 0L, size), y1 = std::clamp(b.y + b.h + dy, 0L, size);
  return {x0, y0, x1 - x0, y1 - y0};
}

/// Resize to image_size x image_size. In training mode the image and box are
/// shifted jointly by up to 10% of the size; draws that leave under a
/// quarter of the box are retried, and after five failures no shift is used.
inline Prepared preprocess(const PlanarImage& image, const Box& box, std::size_t image_size, bool training,
                           std::mt19937_64* rng = nullptr) {
  const long size = static_cast<long>(image_size);
  Prepared out;
  out.image = resize_bilinear(image, image_size, image_size);
  out.box = scale_box(box, static_cast<double>(image_size) / image.width,
                      static_cast<double>(image_size) / image.height, size);
  if (!training) return out;
  if (rng == nullptr) throw std::invalid_argument("preprocess: training mode needs a random source");
  const long reach = static_cast<long>(std::floor(0.1 * image_size));
  std::uniform_int_distribution<long> offset(-reach, reach);
  for (int attempt = 0; attempt < 5; ++attempt) {
    const long dx = offset(*rng), dy = offset(*rng);
    const Box moved = translate_box(out.box, dx, dy, size);
    if (moved.area() * 4 >= out.box.area()) {
      out.image = translate(out.image, dx, dy);
      out.box = moved;
      out.dx = dx;
      out.dy = dy;
      return out;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frame access

/// Frame lookup by relative path, either from memory or from a directory.
class FrameSource {
 public:
  FrameSource() = default;
  explicit FrameSource(std::string root) : root_(std::move(root)) {}
  explicit FrameSource(std::map<std::string, Image> frames) : frames_(std::move(frames)) {}

  Image load(const std::string& relative) const {
    if (auto it = frames_.find(relative); it != frames_.end()) return it->second;
    if (root_.empty()) throw DataError("unknown frame '" + relative + "'");
    return read_png((std::filesystem::path(root_) / relative).string());
  }

 private:
  std::string root_;
  std::map<std::string, Image> frames_;
};

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class Motion { kStraight, kLeftTurn, kRightTurn, kStop };

inline const char* motion_name(Motion m) {
  switch (m) {
    case Motion::kStraight: return "straight";
    case Motion::kLeftTurn: return "left-turn";
    case Motion::kRightTurn: return "right-turn";
    case Motion::kStop: return "stop";
  }
  return "?";
}

struct SynthConfig {
  std::uint64_t seed = 42;
  std::size_t num_tracks = 300;
  std::size_t frames_per_track = 10;
  std::size_t image_size = 96;
  std::vector<std::string> palette = {"black", "white", "gray",  "silver", "red",    "blue",
                                      "green", "yellow", "orange", "brown", "purple", "gold"};
  std::vector<std::string> shapes = {"sedan", "suv", "van", "pickup", "truck", "bus", "hatchback", "wagon", "coupe", "car"};
  std::vector<Motion> motions = {Motion::kStraight, Motion::kLeftTurn, Motion::kRightTurn, Motion::kStop};
  std::size_t distractors = 2;
  double p_noise = 0.1;
};

/// Generating attributes of one synthetic track (lexicon ids).
struct SynthTruth {
  std::size_t color = 0;
  std::size_t type = 0;
  Motion motion = Motion::kStraight;
  int noised_description = -1;  // index of the corrupted description, or -1
  std::size_t noise_color = 0;
};

struct SyntheticCorpus {
  std::vector<Track> tracks;
  std::vector<SynthTruth> truth;
  std::map<std::string, Image> frames;
};

namespace detail {

struct Rgb {
  std::uint8_t r, g, b;
};

inline Rgb body_color(const std::string& name) {
  static const std::map<std::string, Rgb> table = {
      {"black", {15, 15, 18}},    {"white", {240, 240, 240}}, {"gray", {128, 128, 128}}, {"silver", {192, 196, 202}},
      {"red", {205, 25, 25}},     {"blue", {30, 60, 205}},    {"green", {30, 150, 50}},  {"yellow", {235, 215, 30}},
      {"orange", {240, 130, 20}}, {"brown", {120, 72, 32}},   {"purple", {130, 40, 165}}, {"gold", {200, 165, 60}}};
  if (auto it = table.find(name); it != table.end()) return it->second;
  // Colors added to a custom lexicon get a stable hash-derived tint.
  const auto h = std::hash<std::string>{}(name);
  return {static_cast<std::uint8_t>(h), static_cast<std::uint8_t>(h >> 8), static_cast<std::uint8_t>(h >> 16)};
}

struct Style {
  double length, width;  // at a 96-pixel frame
};

inline Style type_style(const std::string& name) {
  static const std::map<std::string, Style> table = {
      {"car", {12, 8}},    {"coupe", {14, 9}},  {"hatchback", {13, 11}}, {"sedan", {18, 10}}, {"wagon", {22, 10}},
      {"suv", {20, 13}},   {"van", {24, 14}},   {"pickup", {26, 12}},    {"truck", {34, 14}}, {"bus", {40, 14}}};
  if (auto it = table.find(name); it != table.end()) return it->second;
  return {16, 10};
}

enum class Paint { kBody, kWindow, kDark, kOutline };

/// Marking pattern in vehicle coordinates: u runs front to back, v from the
/// vehicle's left to its right.
inline Paint paint_at(const std::string& type, long u, long v, long L, long W) {
  if (u == 0 || v == 0 || u == L - 1 || v == W - 1) return Paint::kOutline;
  const double fu = (u + 0.5) / L, fv = (v + 0.5) / W;
  auto along = [fu](double a, double b) { return fu >= a && fu < b; };
  auto across = [fv](double a, double b) { return fv >= a && fv < b; };
  if (type == "car") return along(0.2, 0.35) ? Paint::kWindow : Paint::kBody;
  if (type == "coupe") {
    if (along(0.2, 0.32)) return Paint::kWindow;
    return along(0.4, 0.75) && across(0.25, 0.75) ? Paint::kDark : Paint::kBody;
  }
  if (type == "hatchback") return along(0.15, 0.3) || along(0.6, 0.9) ? Paint::kWindow : Paint::kBody;
  if (type == "sedan") return along(0.18, 0.3) || along(0.72, 0.84) ? Paint::kWindow : Paint::kBody;
  if (type == "wagon") {
    if (along(0.15, 0.25)) return Paint::kWindow;
    return along(0.3, 0.92) && across(0.25, 0.75) ? Paint::kWindow : Paint::kBody;
  }
  if (type == "suv") {
    if (along(0.15, 0.27)) return Paint::kWindow;
    return along(0.32, 0.92) && (across(0.15, 0.3) || across(0.7, 0.85)) ? Paint::kDark : Paint::kBody;
  }
  if (type == "van") {
    if (along(0.05, 0.18)) return Paint::kWindow;
    return along(0.25, 0.95) && across(0.4, 0.6) ? Paint::kWindow : Paint::kBody;
  }
  if (type == "pickup") {
    if (along(0.12, 0.24)) return Paint::kWindow;
    return along(0.45, 0.95) && v >= 2 && v < W - 2 ? Paint::kDark : Paint::kBody;
  }
  if (type == "truck") {
    if (along(0.04, 0.12)) return Paint::kWindow;
    if (along(0.24, 0.28)) return Paint::kDark;
    return fu >= 0.28 && u % 3 == 0 ? Paint::kDark : Paint::kBody;
  }
  if (type == "bus") {
    if (along(0.0, 0.06)) return Paint::kWindow;
    const bool side = v <= 2 || v >= W - 3;
    return side && along(0.1, 0.95) && u % 4 != 0 ? Paint::kWindow : Paint::kBody;
  }
  return along(0.2, 0.3) ? Paint::kWindow : Paint::kBody;
}

enum class Heading { kUp, kDown, kLeft, kRight };

struct Vehicle {
  std::string color, type;
  double cx, cy;
  Heading heading;
  Motion motion;  // drives the indicator and brake lights
};

inline std::pair<long, long> vehicle_extent(const std::string& type, double k) {
  const Style s = type_style(type);
  return {std::max(4L, std::lround(1.5 * s.length * k)), std::max(4L, std::lround(1.5 * s.width * k))};
}

/// Axis-aligned footprint of a vehicle, before clipping to the frame.
inline Box footprint(const Vehicle& v, double k) {
  const auto [L, W] = vehicle_extent(v.type, k);
  const bool vertical = v.heading == Heading::kUp || v.heading == Heading::kDown;
  const long bw = vertical ? W : L, bh = vertical ? L : W;
  return {std::lround(v.cx - bw / 2.0), std::lround(v.cy - bh / 2.0), bw, bh};
}

inline void draw_vehicle(Image& img, const Vehicle& v, double k) {
  const auto [L, W] = vehicle_extent(v.type, k);
  const Box fp = footprint(v, k);
  const Rgb body = body_color(v.color);
  const Rgb window{90, 130, 170};
  const Rgb indicator{255, 180, 0};
  const Rgb brake{255, 30, 30};
  auto shade = [](Rgb c, double f) {
    return Rgb{static_cast<std::uint8_t>(c.r * f), static_cast<std::uint8_t>(c.g * f), static_cast<std::uint8_t>(c.b * f)};
  };
  const Rgb dark = shade(body, 0.4), outline = shade(body, 0.65);
  const long lamp = std::max(2L, std::lround(2 * k));
  for (long y = 0; y < fp.h; ++y) {
    for (long x = 0; x < fp.w; ++x) {
      const long px = fp.x + x, py = fp.y + y;
      if (px < 0 || py < 0 || px >= static_cast<long>(img.width) || py >= static_cast<long>(img.height)) continue;
      long u = 0, across = 0;
      switch (v.heading) {
        case Heading::kUp: u = y, across = x; break;
        case Heading::kDown: u = L - 1 - y, across = W - 1 - x; break;
        case Heading::kLeft: u = x, across = W - 1 - y; break;
        case Heading::kRight: u = L - 1 - x, across = y; break;
      }
      Rgb c = body;
      switch (paint_at(v.type, u, across, L, W)) {
        case Paint::kBody: break;
        case Paint::kWindow: c = window; break;
        case Paint::kDark: c = dark; break;
        case Paint::kOutline: c = outline; break;
      }
      const bool front = u < lamp, rear = u >= L - lamp;
      const bool left = across < lamp, right = across >= W - lamp;
      if ((front || rear) && ((v.motion == Motion::kLeftTurn && left) || (v.motion == Motion::kRightTurn && right))) {
        c = indicator;
      } else if (v.motion == Motion::kStop && rear && (left || right)) {
        c = brake;
      }
      auto* p = img.pixel(px, py);
      p[0] = c.r, p[1] = c.g, p[2] = c.b;
    }
  }
}

/// Position and heading at frame `f` for a vehicle entering at (x0, y0)
/// heading up with speed `v`; turns happen at `turn_at`.
inline void place(Vehicle& veh, double x0, double y0, double v, std::size_t f, std::size_t turn_at) {
  veh.cx = x0;
  veh.cy = y0;
  veh.heading = Heading::kUp;
  switch (veh.motion) {
    case Motion::kStraight: veh.cy -= v * f; break;
    case Motion::kStop: {
      double travelled = 0;
      for (std::size_t s = 0; s < f; ++s) travelled += v * std::max(0.0, 1.0 - s / 3.0);
      veh.cy -= travelled;
      break;
    }
    case Motion::kLeftTurn:
    case Motion::kRightTurn: {
      veh.cy -= v * std::min(f, turn_at);
      if (f >= turn_at) {
        const bool left = veh.motion == Motion::kLeftTurn;
        const double side = v * (f - turn_at);
        veh.heading = left ? Heading::kLeft : Heading::kRight;
        veh.cx += left ? -side : side;
      }
      break;
    }
  }
}

inline Box clip_box(const Box& b, long size) { return translate_box(b, 0, 0, size); }

inline std::string pick(const std::vector<std::string>& options, std::mt19937_64& rng) {
  return options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng)];
}

inline std::string phrase_text(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
  return out;
}

inline std::string surface(const LexiconEntry& entry, std::mt19937_64& rng) {
  return phrase_text(entry.phrases[std::uniform_int_distribution<std::size_t>(0, entry.phrases.size() - 1)(rng)]);
}

inline std::string motion_phrase(Motion m, std::size_t variant) {
  static const std::map<Motion, std::array<const char*, 3>> table = {
      {Motion::kStraight, {"goes straight", "keeps going straight", "drives straight ahead"}},
      {Motion::kLeftTurn, {"turns left", "is turning left", "makes a left turn"}},
      {Motion::kRightTurn, {"turns right", "is turning right", "makes a right turn"}},
      {Motion::kStop, {"stops", "comes to a stop", "waits"}}};
  return table.at(m)[variant % 3];
}

inline std::string describe(std::size_t template_id, const std::string& color, const std::string& type, Motion m) {
  switch (template_id) {
    case 0: return "A " + color + " " + type + " " + motion_phrase(m, 0) + ".";
    case 1: return "The " + color + " " + type + " " + motion_phrase(m, 1) + " at the intersection.";
    default: {
      std::string c = color;
      c[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(c[0])));
      return c + " " + type + " " + motion_phrase(m, 2) + " on the road.";
    }
  }
}

}  // namespace detail

/// Renders `num_tracks` scenes. Every output byte is a function of the config.
inline SyntheticCorpus generate_synthetic(const SynthConfig& config,
                                          const AttributeLexicon& lexicon = AttributeLexicon::standard()) {
  if (config.num_tracks < 1) throw DataError("synth: num_tracks must be at least 1");
  if (config.frames_per_track < 1) throw DataError("synth: frames_per_track must be at least 1");
  if (config.image_size < 16) throw DataError("synth: image_size must be at least 16");
  if (config.palette.empty() || config.shapes.empty() || config.motions.empty()) {
    throw DataError("synth: palette, shapes and motions must be non-empty");
  }
  if (config.p_noise < 0 || config.p_noise > 1) throw DataError("synth: p_noise must lie in [0, 1]");
  if (config.p_noise > 0 && config.palette.size() < 2) throw DataError("synth: noise needs at least two palette colors");
  std::vector<std::size_t> color_ids, type_ids;
  for (const auto& c : config.palette) {
    auto id = lexicon.find(AttributeFamily::kColor, c);
    if (!id) throw DataError("synth: palette color '" + c + "' is not in the lexicon");
    color_ids.push_back(*id);
  }
  for (const auto& t : config.shapes) {
    auto id = lexicon.find(AttributeFamily::kType, t);
    if (!id) throw DataError("synth: shape '" + t + "' is not in the lexicon");
    type_ids.push_back(*id);
  }

  std::mt19937_64 rng(config.seed);
  const double k = config.image_size / 96.0;
  const long size = static_cast<long>(config.image_size);

  // (color, type) pairs come from a shuffled deck so that a pair repeats
  // only once every pair has been used; motions cycle through their own deck.
  std::vector<std::pair<std::size_t, std::size_t>> deck;
  for (std::size_t c = 0; c < color_ids.size(); ++c) {
    for (std::size_t t = 0; t < type_ids.size(); ++t) deck.emplace_back(c, t);
  }
  std::vector<std::size_t> motion_deck(config.motions.size());
  for (std::size_t m = 0; m < motion_deck.size(); ++m) motion_deck[m] = m;

  // Three lanes; every vehicle enters from the lower part of its lane.
  const std::array<double, 3> lanes = {20 * k, 48 * k, 76 * k};

  SyntheticCorpus corpus;
  const int width = config.num_tracks > 9999 ? static_cast<int>(std::to_string(config.num_tracks).size()) : 4;
  for (std::size_t n = 0; n < config.num_tracks; ++n) {
    if (n % deck.size() == 0) std::shuffle(deck.begin(), deck.end(), rng);
    if (n % motion_deck.size() == 0) std::shuffle(motion_deck.begin(), motion_deck.end(), rng);
    const auto [ci, ti] = deck[n % deck.size()];
    const std::size_t mi = motion_deck[n % motion_deck.size()];
    SynthTruth truth{color_ids[ci], type_ids[ti], config.motions[mi], -1, 0};

    std::ostringstream id;
    id << "track_" << std::setw(width) << std::setfill('0') << n;
    Track track;
    track.track_id = id.str();

    // Background: flat asphalt with a per-scene brightness offset and fixed
    // per-pixel grain.
    const int base = std::uniform_int_distribution<int>(-8, 8)(rng);
    Image background(config.image_size, config.image_size);
    std::uniform_int_distribution<int> grain(-4, 4);
    for (std::size_t i = 0; i < config.image_size * config.image_size; ++i) {
      const int g = grain(rng);
      background.rgb[i * 3] = static_cast<std::uint8_t>(std::clamp(58 + base + g, 0, 255));
      background.rgb[i * 3 + 1] = static_cast<std::uint8_t>(std::clamp(62 + base + g, 0, 255));
      background.rgb[i * 3 + 2] = static_cast<std::uint8_t>(std::clamp(64 + base + g, 0, 255));
    }

    struct Mover {
      detail::Vehicle vehicle;
      double x0, y0, speed;
    };
    std::vector<Mover> movers{{{config.palette[ci], config.shapes[ti], 0, 0, detail::Heading::kUp, truth.motion}, 0, 0, 0}};

    // Distractors differ from the target in color, type or both; a third
    // share its color and a third share its type.
    for (std::size_t d = 0; d < config.distractors; ++d) {
      std::size_t dc = ci, dt = ti;
      const int mode = std::uniform_int_distribution<int>(0, 2)(rng);
      for (int guard = 0; guard < 64 && dc == ci && dt == ti; ++guard) {
        if (mode != 0 || color_ids.size() == 1) dt = std::uniform_int_distribution<std::size_t>(0, type_ids.size() - 1)(rng);
        if (mode != 1 || type_ids.size() == 1) dc = std::uniform_int_distribution<std::size_t>(0, color_ids.size() - 1)(rng);
      }
      const auto motion = config.motions[std::uniform_int_distribution<std::size_t>(0, config.motions.size() - 1)(rng)];
      movers.push_back({{config.palette[dc], config.shapes[dt], 0, 0, detail::Heading::kUp, motion}, 0, 0, 0});
    }

    // Every vehicle is placed the same way, so only its appearance and
    // motion tell the target apart. A lane suits a vehicle when its turn
    // keeps it inside the frame; the target always gets a suitable lane.
    auto suits = [](Motion m, std::size_t lane) {
      return !(m == Motion::kLeftTurn && lane == 0) && !(m == Motion::kRightTurn && lane == 2);
    };
    std::vector<std::size_t> lane_of(movers.size());
    std::size_t best_fit = 0;
    for (int attempt = 0; attempt < 16; ++attempt) {
      std::vector<std::size_t> order = {0, 1, 2};
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<std::size_t> candidate(movers.size());
      std::size_t fit = 0;
      for (std::size_t m = 0; m < movers.size(); ++m) {
        candidate[m] = m < order.size() ? order[m] : std::uniform_int_distribution<std::size_t>(0, 2)(rng);
        fit += suits(movers[m].vehicle.motion, candidate[m]);
      }
      if (!suits(movers[0].vehicle.motion, candidate[0])) continue;
      if (fit > best_fit) best_fit = fit, lane_of = candidate;
      if (fit == movers.size()) break;
    }
    std::uniform_real_distribution<double> start(62 * k, 78 * k), speed(3.0 * k, 4.0 * k);
    for (std::size_t m = 0; m < movers.size(); ++m) {
      movers[m].x0 = lanes[lane_of[m]];
      movers[m].y0 = start(rng);
      movers[m].speed = speed(rng);
    }
    std::vector<std::size_t> draw_order(movers.size());
    for (std::size_t m = 0; m < draw_order.size(); ++m) draw_order[m] = m;
    std::shuffle(draw_order.begin(), draw_order.end(), rng);

    const std::size_t turn_at = std::max<std::size_t>(1, config.frames_per_track / 2);
    for (std::size_t f = 0; f < config.frames_per_track; ++f) {
      Image frame = background;
      for (std::size_t m : draw_order) {
        auto& o = movers[m];
        detail::place(o.vehicle, o.x0, o.y0, o.speed, f, turn_at);
        detail::draw_vehicle(frame, o.vehicle, k);
      }
      const auto& t = movers[0].vehicle;
      Box box = detail::clip_box(detail::footprint(t, k), size);
      if (box.w <= 0 || box.h <= 0) {
        box = {std::clamp(std::lround(t.cx), 0L, size - 1), std::clamp(std::lround(t.cy), 0L, size - 1), 1, 1};
      }

      std::ostringstream path;
      path << "frames/" << track.track_id << "/" << std::setw(3) << std::setfill('0') << f << ".png";
      track.frames.push_back(path.str());
      track.boxes.push_back(box);
      corpus.frames.emplace(path.str(), std::move(frame));
    }

    const auto& color_entry = lexicon.entries(AttributeFamily::kColor)[truth.color];
    const auto& type_entry = lexicon.entries(AttributeFamily::kType)[truth.type];
    for (std::size_t d = 0; d < 3; ++d) {
      track.nl[d] = detail::describe(d, detail::surface(color_entry, rng), detail::surface(type_entry, rng), truth.motion);
    }
    if (std::uniform_real_distribution<double>(0, 1)(rng) < config.p_noise) {
      const std::size_t which = std::uniform_int_distribution<std::size_t>(0, 2)(rng);
      std::size_t other = std::uniform_int_distribution<std::size_t>(0, color_ids.size() - 2)(rng);
      if (other >= ci) ++other;
      truth.noised_description = static_cast<int>(which);
      truth.noise_color = color_ids[other];
      const auto& noise_entry = lexicon.entries(AttributeFamily::kColor)[truth.noise_color];
      track.nl[which] =
          detail::describe(which, detail::surface(noise_entry, rng), detail::surface(type_entry, rng), truth.motion);
    }
    corpus.tracks.push_back(std::move(track));
    corpus.truth.push_back(truth);
  }
  return corpus;
}

/// Seeded shuffle, then the first `train_fraction` of tracks go to training.
/// Both halves come back sorted by track id.
inline std::pair<std::vector<Track>, std::vector<Track>> split_tracks(const std::vector<Track>& tracks,
                                                                      std::uint64_t seed, double train_fraction = 0.8) {
  std::vector<std::size_t> order(tracks.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * tracks.size()));
  std::vector<Track> train, test;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_train ? train : test).push_back(tracks[order[i]]);
  auto by_id = [](const Track& a, const Track& b) { return a.track_id < b.track_id; };
  std::sort(train.begin(), train.end(), by_id);
  std::sort(test.begin(), test.end(), by_id);
  return {train, test};
}

// ---------------------------------------------------------------------------
// Queries and ground truth

using Queries = std::map<std::string, std::array<std::string, 3>>;
using GroundTruth = std::map<std::string, std::string>;

/// One query per track, keyed "query_<track id>", using the track's own
/// descriptions.
inline std::pair<Queries, GroundTruth> queries_from_tracks(const std::vector<Track>& tracks) {
  Queries q;
  GroundTruth gt;
  for (const auto& t : tracks) {
    const std::string id = "query_" + t.track_id;
    q[id] = t.nl;
    gt[id] = t.track_id;
  }
  return {q, gt};
}

inline void save_queries(const std::string& path, const Queries& queries) {
  nlohmann::json root = nlohmann::json::object();
  for (const auto& [id, nl] : queries) root[id] = {{"nl", nl}};
  write_text_file(path, root.dump(2) + "\n");
}

inline Queries load_queries(const std::string& path) {
  const auto root = parse_json(read_text_file(path), path);
  Queries out;
  for (const auto& [id, value] : root.items()) {
    const auto& nl = value.at("nl");
    if (!nl.is_array() || nl.size() != 3) throw DataError("query " + id + ": expected exactly 3 descriptions");
    for (std::size_t k = 0; k < 3; ++k) out[id][k] = nl[k].get<std::string>();
  }
  return out;
}

inline void save_ground_truth(const std::string& path, const GroundTruth& gt) {
  write_text_file(path, nlohmann::json(gt).dump(2) + "\n");
}

inline GroundTruth load_ground_truth(const std::string& path) {
  return parse_json(read_text_file(path), path).get<GroundTruth>();
}

}  // namespace sbnet
