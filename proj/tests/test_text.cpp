#include <gtest/gtest.h>

#include "sbnet/sbnet.hpp"

using namespace sbnet;

namespace {

const AttributeLexicon& lexicon() {
  static const AttributeLexicon lex = AttributeLexicon::standard();
  return lex;
}

std::size_t color(const std::string& name) { return *lexicon().find(AttributeFamily::kColor, name); }
std::size_t type(const std::string& name) { return *lexicon().find(AttributeFamily::kType, name); }

}  // namespace

TEST(Words, SplitLowercasesAndRecordsSpans) {
  const auto words = split_words("A Red SUV, turning-left!");
  ASSERT_EQ(words.size(), 5u);
  EXPECT_EQ(words[1].text, "red");
  EXPECT_EQ(words[2].text, "suv");
  EXPECT_EQ(words[2].begin, 6u);
  EXPECT_EQ(words[2].end, 9u);
  EXPECT_EQ(words[4].text, "left");
}

TEST(Vocab, ReservedIdsAndUnknown) {
  auto v = Vocab::build({"a red car", "a blue car"});
  EXPECT_EQ(v.size(), 3u + 4u);
  EXPECT_EQ(v.id("a"), Vocab::kReserved);
  EXPECT_EQ(v.id("zebra"), Vocab::kUnk);
  EXPECT_EQ(Vocab::from_text(v.to_text()).tokens(), v.tokens());
  EXPECT_THROW(Vocab::from_text("a\nb\na\n"), std::runtime_error);
}

TEST(Tokenize, ClsFirstPaddingMaskedAndTruncated) {
  auto v = Vocab::build({"a red car goes straight"});
  auto seq = tokenize("A red car goes straight.", v, 8);
  ASSERT_EQ(seq.ids.size(), 8u);
  EXPECT_EQ(seq.ids[0], Vocab::kCls);
  EXPECT_EQ(seq.ids[1], v.id("a"));
  EXPECT_EQ(seq.mask[5], 1);
  EXPECT_EQ(seq.ids[6], Vocab::kPad);
  EXPECT_EQ(seq.mask[6], 0);

  auto short_seq = tokenize("a red car goes straight", v, 4);
  EXPECT_EQ(short_seq.ids[3], v.id("car"));
  EXPECT_EQ(short_seq.mask[3], 1);
  EXPECT_THROW(tokenize("a", v, 1), std::invalid_argument);
}

TEST(Lexicon, StandardHasTwelveColorsAndTenTypes) {
  EXPECT_EQ(lexicon().num_colors(), 12u);
  EXPECT_EQ(lexicon().num_types(), 10u);
  EXPECT_EQ(AttributeLexicon::parse(lexicon().to_text()).to_text(), lexicon().to_text());
}

TEST(Lexicon, ParseErrors) {
  EXPECT_THROW(AttributeLexicon::parse("red:\n"), std::runtime_error);
  EXPECT_THROW(AttributeLexicon::parse("[colors]\nred\n"), std::runtime_error);
  EXPECT_THROW(AttributeLexicon::parse("[colors]\nDark Red:\n"), std::runtime_error);
  EXPECT_THROW(AttributeLexicon::parse("[colors]\nred: crimson\nblue: crimson\n"), std::runtime_error);
}

TEST(Extract, SynonymsMapToCanonical) {
  auto a = extract_attributes("A grey minivan turns left.", lexicon());
  EXPECT_EQ(a.color, color("gray"));
  EXPECT_EQ(a.type, type("van"));
  auto b = extract_attributes("The small car stops.", lexicon());
  EXPECT_FALSE(b.color.has_value());
  EXPECT_EQ(b.type, type("car"));
  auto c = extract_attributes("A cargo truck.", lexicon());
  EXPECT_EQ(c.type, type("truck"));
}

TEST(Extract, LongestPhraseWinsAtAPosition) {
  EXPECT_EQ(extract_attributes("a red pickup truck", lexicon()).type, type("pickup"));
  EXPECT_EQ(extract_attributes("a station wagon", lexicon()).type, type("wagon"));
}

TEST(Extract, FirstMentionWins) {
  auto a = extract_attributes("A blue sedan follows a red bus.", lexicon());
  EXPECT_EQ(a.color, color("blue"));
  EXPECT_EQ(a.type, type("sedan"));
}

TEST(Vote, MajorityThenFirstSeen) {
  using V = std::array<std::optional<std::size_t>, 3>;
  EXPECT_EQ(vote(V{1, 2, 2}), 2);
  EXPECT_EQ(vote(V{3, 1, 2}), 3);
  EXPECT_EQ(vote(V{std::nullopt, 4, std::nullopt}), 4);
  EXPECT_EQ(vote(V{}), TrackAttributes::kUnknownAttribute);
}

TEST(Denoise, OutlierColorRewritten) {
  const std::array<std::string, 3> nl = {"A red sedan goes straight.", "The crimson sedan at the intersection.",
                                         "Blue sedan goes straight on the road."};
  const auto d = denoise_queries(nl, lexicon());
  EXPECT_EQ(d.attributes.color_id, static_cast<int>(color("red")));
  EXPECT_EQ(d.attributes.type_id, static_cast<int>(type("sedan")));
  EXPECT_EQ(d.rewritten[0], nl[0]);
  EXPECT_EQ(d.rewritten[1], nl[1]);
  EXPECT_EQ(d.rewritten[2], "red sedan goes straight on the road.");
  EXPECT_EQ(d.attributes.provenance[2].color, color("blue"));
}

TEST(Denoise, OnlyFirstMentionRewritten) {
  const std::array<std::string, 3> nl = {"A white van.", "A white van.", "A black van behind a black car."};
  const auto d = denoise_queries(nl, lexicon());
  EXPECT_EQ(d.rewritten[2], "A white van behind a black car.");
}

TEST(Denoise, IdempotentAndDeterministic) {
  const std::array<std::string, 3> nl = {"A maroon SUV stops.", "A red crossover stops.", "A golden suv stops."};
  const auto once = denoise_queries(nl, lexicon());
  const auto twice = denoise_queries(once.rewritten, lexicon());
  EXPECT_EQ(once.rewritten, twice.rewritten);
  EXPECT_EQ(once.attributes.color_id, twice.attributes.color_id);
  EXPECT_EQ(denoise_queries(nl, lexicon()).rewritten, once.rewritten);
}

TEST(Denoise, UnknownFamilyLeavesTextAlone) {
  const std::array<std::string, 3> nl = {"A vehicle.", "Something moving.", "It stops."};
  const auto d = denoise_queries(nl, lexicon());
  EXPECT_EQ(d.attributes.color_id, TrackAttributes::kUnknownAttribute);
  EXPECT_EQ(d.attributes.type_id, TrackAttributes::kUnknownAttribute);
  EXPECT_EQ(d.rewritten, nl);
}
