#pragma once

// Word-level tokenizer, color/type lexicon matching and the three-description
// voting denoiser.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace sbnet {

/// A lowercase word and its byte span in the source text.
struct Word {
  std::string text;
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Splits on every non-alphanumeric byte and lowercases ASCII letters.
inline std::vector<Word> split_words(const std::string& text) {
  std::vector<Word> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && !std::isalnum(static_cast<unsigned char>(text[i]))) ++i;
    if (i >= text.size()) break;
    Word w;
    w.begin = i;
    while (i < text.size() && std::isalnum(static_cast<unsigned char>(text[i]))) {
      w.text.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[i]))));
      ++i;
    }
    w.end = i;
    words.push_back(std::move(w));
  }
  return words;
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenization

class Vocab {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kCls = 1;
  static constexpr std::int64_t kUnk = 2;
  static constexpr std::int64_t kReserved = 3;

  Vocab() = default;

  std::int64_t add(const std::string& token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    const std::int64_t id = kReserved + static_cast<std::int64_t>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
  }

  std::int64_t id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  std::size_t size() const { return static_cast<std::size_t>(kReserved) + tokens_.size(); }

  /// Non-reserved tokens in id order.
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// One token per line; line k has id k + kReserved.
  std::string to_text() const {
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
  }

  static Vocab from_text(const std::string& text) {
    Vocab v;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (v.contains(line)) throw std::runtime_error("vocab: duplicate token '" + line + "'");
      v.add(line);
    }
    return v;
  }

  /// Collects every word of `texts` in first-seen order.
  static Vocab build(const std::vector<std::string>& texts) {
    Vocab v;
    for (const auto& t : texts) {
      for (const auto& w : split_words(t)) v.add(w.text);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> ids_;
};

/// Fixed-length id sequence; ids[0] is CLS, trailing positions are PAD with mask 0.
struct TokenSeq {
  std::vector<std::int64_t> ids;
  std::vector<std::uint8_t> mask;
};

inline TokenSeq tokenize(const std::string& description, const Vocab& vocab, std::size_t length) {
  if (length < 2) throw std::invalid_argument("tokenize: sequence length must be at least 2");
  TokenSeq seq;
  seq.ids.assign(length, Vocab::kPad);
  seq.mask.assign(length, 0);
  seq.ids[0] = Vocab::kCls;
  seq.mask[0] = 1;
  const auto words = split_words(description);
  if (words.empty()) std::clog << "warning: empty description tokenized to CLS only\n";
  for (std::size_t i = 0; i < words.size() && i + 1 < length; ++i) {
    seq.ids[i + 1] = vocab.id(words[i].text);
    seq.mask[i + 1] = 1;
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Attribute lexicon

enum class AttributeFamily { kColor, kType };

struct LexiconEntry {
  std::string canonical;
  std::vector<std::vector<std::string>> phrases;  // canonical first, then synonyms
};

class AttributeLexicon {
 public:
  AttributeLexicon() = default;
  AttributeLexicon(std::vector<LexiconEntry> colors, std::vector<LexiconEntry> types)
      : colors_(std::move(colors)), types_(std::move(types)) {
    check_disjoint(colors_, "colors");
    check_disjoint(types_, "types");
  }

  /// The 12-color / 10-type lexicon used throughout the project.
  static AttributeLexicon standard() {
    return parse(
        "[colors]\n"
        "black:\n"
        "white:\n"
        "gray: grey\n"
        "silver:\n"
        "red: maroon, crimson\n"
        "blue: navy\n"
        "green:\n"
        "yellow:\n"
        "orange:\n"
        "brown: beige, tan\n"
        "purple: violet\n"
        "gold: golden\n"
        "[types]\n"
        "sedan: saloon\n"
        "suv: sport utility vehicle, crossover\n"
        "van: minivan\n"
        "pickup: pickup truck, pick up\n"
        "truck: cargo truck, lorry\n"
        "bus:\n"
        "hatchback:\n"
        "wagon: station wagon, estate\n"
        "coupe:\n"
        "car: small car, compact car\n");
  }

  /// `[colors]` / `[types]` sections of `canonical: syn1, syn2` lines.
  static AttributeLexicon parse(const std::string& text) {
    std::vector<LexiconEntry> colors, types;
    std::vector<LexiconEntry>* section = nullptr;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto trimmed = trim(line);
      if (trimmed.empty() || trimmed[0] == '#') continue;
      if (trimmed == "[colors]") {
        section = &colors;
        continue;
      }
      if (trimmed == "[types]") {
        section = &types;
        continue;
      }
      if (section == nullptr) throw std::runtime_error("lexicon line " + std::to_string(line_no) + ": entry outside a section");
      const auto colon = trimmed.find(':');
      if (colon == std::string::npos) throw std::runtime_error("lexicon line " + std::to_string(line_no) + ": missing ':'");
      LexiconEntry e;
      e.canonical = trim(trimmed.substr(0, colon));
      const auto canon_words = words_of(e.canonical);
      if (canon_words.size() != 1 || canon_words[0] != e.canonical) {
        throw std::runtime_error("lexicon line " + std::to_string(line_no) + ": canonical form must be one lowercase word");
      }
      e.phrases.push_back(canon_words);
      std::istringstream syns(trimmed.substr(colon + 1));
      std::string syn;
      while (std::getline(syns, syn, ',')) {
        auto w = words_of(syn);
        if (!w.empty()) e.phrases.push_back(std::move(w));
      }
      section->push_back(std::move(e));
    }
    return AttributeLexicon(std::move(colors), std::move(types));
  }

  std::string to_text() const {
    std::string out;
    auto emit = [&out](const char* header, const std::vector<LexiconEntry>& entries) {
      out += header;
      out += '\n';
      for (const auto& e : entries) {
        out += e.canonical + ":";
        for (std::size_t p = 1; p < e.phrases.size(); ++p) {
          out += p == 1 ? " " : ", ";
          for (std::size_t w = 0; w < e.phrases[p].size(); ++w) out += (w ? " " : "") + e.phrases[p][w];
        }
        out += '\n';
      }
    };
    emit("[colors]", colors_);
    emit("[types]", types_);
    return out;
  }

  const std::vector<LexiconEntry>& entries(AttributeFamily family) const {
    return family == AttributeFamily::kColor ? colors_ : types_;
  }
  std::size_t num_colors() const { return colors_.size(); }
  std::size_t num_types() const { return types_.size(); }
  const std::string& color_name(std::size_t id) const { return colors_.at(id).canonical; }
  const std::string& type_name(std::size_t id) const { return types_.at(id).canonical; }

  std::optional<std::size_t> find(AttributeFamily family, const std::string& canonical) const {
    const auto& list = entries(family);
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (list[i].canonical == canonical) return i;
    }
    return std::nullopt;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static std::vector<std::string> words_of(const std::string& s) {
    std::vector<std::string> out;
    for (auto& w : split_words(s)) out.push_back(std::move(w.text));
    return out;
  }

  static void check_disjoint(const std::vector<LexiconEntry>& entries, const char* family) {
    std::map<std::vector<std::string>, std::string> owner;
    for (const auto& e : entries) {
      for (const auto& p : e.phrases) {
        auto [it, inserted] = owner.emplace(p, e.canonical);
        if (!inserted && it->second != e.canonical) {
          throw std::runtime_error(std::string("lexicon ") + family + ": phrase shared by '" + it->second +
                                   "' and '" + e.canonical + "'");
        }
      }
    }
  }

  std::vector<LexiconEntry> colors_;
  std::vector<LexiconEntry> types_;
};

// ---------------------------------------------------------------------------
// Extraction

/// A lexicon hit: entry id plus the word and byte span it covers.
struct Mention {
  std::size_t id = 0;
  std::size_t first_word = 0;
  std::size_t word_count = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Leftmost mention of `family`; at a given position the longest phrase wins.
inline std::optional<Mention> find_first_mention(const std::vector<Word>& words, const AttributeLexicon& lexicon,
                                                 AttributeFamily family) {
  const auto& entries = lexicon.entries(family);
  for (std::size_t pos = 0; pos < words.size(); ++pos) {
    std::optional<Mention> best;
    for (std::size_t id = 0; id < entries.size(); ++id) {
      for (const auto& phrase : entries[id].phrases) {
        if (pos + phrase.size() > words.size()) continue;
        if (best && phrase.size() <= best->word_count) continue;
        bool match = true;
        for (std::size_t k = 0; k < phrase.size() && match; ++k) match = words[pos + k].text == phrase[k];
        if (match) best = Mention{id, pos, phrase.size(), words[pos].begin, words[pos + phrase.size() - 1].end};
      }
    }
    if (best) return best;
  }
  return std::nullopt;
}

struct ExtractedAttributes {
  std::optional<std::size_t> color;
  std::optional<std::size_t> type;
  bool operator==(const ExtractedAttributes&) const = default;
};

inline ExtractedAttributes extract_attributes(const std::string& description, const AttributeLexicon& lexicon) {
  const auto words = split_words(description);
  ExtractedAttributes out;
  if (auto m = find_first_mention(words, lexicon, AttributeFamily::kColor)) out.color = m->id;
  if (auto m = find_first_mention(words, lexicon, AttributeFamily::kType)) out.type = m->id;
  return out;
}

// ---------------------------------------------------------------------------
// Denoising

/// Voted attributes of one track. An id of kUnknownAttribute means no
/// description named that family.
struct TrackAttributes {
  static constexpr int kUnknownAttribute = -1;
  int color_id = kUnknownAttribute;
  int type_id = kUnknownAttribute;
  std::array<ExtractedAttributes, 3> provenance{};

  bool operator==(const TrackAttributes&) const = default;
};

struct DenoisedQuery {
  TrackAttributes attributes;
  std::array<std::string, 3> rewritten;
};

/// Majority vote over present votes; ties go to the id first seen in
/// description order. Returns kUnknownAttribute when nobody voted.
inline int vote(const std::array<std::optional<std::size_t>, 3>& votes) {
  std::map<std::size_t, int> counts;
  for (const auto& v : votes) {
    if (v) ++counts[*v];
  }
  int best = TrackAttributes::kUnknownAttribute;
  int best_count = 0;
  for (const auto& v : votes) {
    if (!v) continue;
    const int c = counts[*v];
    if (c > best_count) {
      best_count = c;
      best = static_cast<int>(*v);
    }
  }
  return best;
}

inline DenoisedQuery denoise_queries(const std::array<std::string, 3>& descriptions, const AttributeLexicon& lexicon) {
  DenoisedQuery result;
  std::array<std::optional<Mention>, 3> color_hits, type_hits;
  std::array<std::optional<std::size_t>, 3> color_votes, type_votes;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto words = split_words(descriptions[k]);
    color_hits[k] = find_first_mention(words, lexicon, AttributeFamily::kColor);
    type_hits[k] = find_first_mention(words, lexicon, AttributeFamily::kType);
    if (color_hits[k]) color_votes[k] = color_hits[k]->id;
    if (type_hits[k]) type_votes[k] = type_hits[k]->id;
    result.attributes.provenance[k] = {color_votes[k], type_votes[k]};
  }
  result.attributes.color_id = vote(color_votes);
  result.attributes.type_id = vote(type_votes);

  for (std::size_t k = 0; k < 3; ++k) {
    struct Edit {
      std::size_t begin, end;
      std::string replacement;
    };
    std::vector<Edit> edits;
    const int color = result.attributes.color_id;
    const int type = result.attributes.type_id;
    if (color_hits[k] && color >= 0 && color_hits[k]->id != static_cast<std::size_t>(color)) {
      edits.push_back({color_hits[k]->begin, color_hits[k]->end, lexicon.color_name(color)});
    }
    if (type_hits[k] && type >= 0 && type_hits[k]->id != static_cast<std::size_t>(type)) {
      edits.push_back({type_hits[k]->begin, type_hits[k]->end, lexicon.type_name(type)});
    }
    std::sort(edits.begin(), edits.end(), [](const Edit& a, const Edit& b) { return a.begin > b.begin; });
    std::string text = descriptions[k];
    for (const auto& e : edits) text.replace(e.begin, e.end - e.begin, e.replacement);
    result.rewritten[k] = std::move(text);
  }
  return result;
}

}  // namespace sbnet
