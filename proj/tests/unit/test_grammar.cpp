#include "doctest.h"

#include "ematrace/grammar.hpp"

#include <algorithm>
#include <filesystem>
#include <set>

using namespace ematrace::grammar;

namespace {

bool contains(const std::vector<std::string>& v, const std::string& w) {
  return std::find(v.begin(), v.end(), w) != v.end();
}

}  // namespace

TEST_CASE("lexicon examples") {
  const auto a = build_grammar(Variant::A, 0);
  const auto b = build_grammar(Variant::B, 0);
  for (const char* w : {"cat", "dog", "bird"}) CHECK(contains(a.lexicon.at(Category::Noun), w));
  for (const char* w : {"car", "bus", "bike"}) CHECK(contains(b.lexicon.at(Category::Noun), w));
  CHECK(a.templates == b.templates);
  CHECK(build_grammar(Variant::A, 7).templates == b.templates);
  CHECK(a.templates.size() == 6);
}

TEST_CASE("147 words, content disjoint, function words shared") {
  const auto a = build_grammar(Variant::A);
  const auto b = build_grammar(Variant::B);
  std::set<std::string> all;
  for (const auto& w : a.words()) all.insert(w);
  for (const auto& w : b.words()) all.insert(w);
  CHECK(all.size() == kVocabSize);
  CHECK(Vocabulary::instance().size() == kVocabSize);

  for (const auto& [cat, words] : a.lexicon) {
    const auto& other = b.lexicon.at(cat);
    if (is_content(cat)) {
      for (const auto& w : words) CHECK_FALSE(contains(other, w));
    } else {
      CHECK(words == other);
    }
  }
}

TEST_CASE("every template slot has one role from the inventory") {
  CHECK(all_roles().size() == kNumRoles);
  const auto g = build_grammar(Variant::A);
  for (const auto& t : g.templates) {
    CHECK_FALSE(t.slots.empty());
    for (const auto& s : t.slots) {
      CHECK(static_cast<int>(s.role) < kNumRoles);
    }
  }
  for (Role r : all_roles()) {
    CHECK(role_from_name(role_name(r)) == r);
  }
}

TEST_CASE("transitive example sentence") {
  const auto g = build_grammar(Variant::A);
  const auto& t = g.template_for(Structure::Transitive);
  std::vector<Role> roles;
  for (const auto& s : t.slots) roles.push_back(s.role);
  const std::vector<Role> expected{Role::DetAgent,   Role::AdjAgent,   Role::NounAgent,  Role::Verb,
                                   Role::DetPatient, Role::AdjPatient, Role::NounPatient};
  CHECK(roles == expected);
  for (const char* w : {"big", "small"}) CHECK(contains(g.lexicon.at(Category::Adjective), w));
  CHECK(contains(g.lexicon.at(Category::Verb), "chases"));
}

TEST_CASE("dataset generation") {
  const auto g = build_grammar(Variant::A);
  CHECK(generate_dataset(g, 0, 1).empty());

  const auto data = generate_dataset(g, 5000, 1);
  const auto tokens = count_tokens(data);
  CHECK(tokens >= 30000);
  CHECK(tokens <= 40000);

  std::array<int, kNumStructures> per{};
  std::set<Role> seen;
  for (const auto& s : data) {
    REQUIRE(s.tokens.size() == s.roles.size());
    per[static_cast<std::size_t>(s.structure)]++;
    seen.insert(s.roles.begin(), s.roles.end());
    CHECK(infer_structure(s.roles) == s.structure);
    if (s.structure == Structure::Passive) CHECK(s.roles[0] == Role::DetPatient);
    if (s.structure == Structure::Transitive) CHECK(s.roles[0] == Role::DetAgent);
  }
  for (int c : per) CHECK(std::abs(c - 5000 / 6) <= 1);
  CHECK(seen.size() == kNumRoles);
}

TEST_CASE("splits") {
  const auto s = make_splits(1);
  CHECK(s.train.size() == 5000);
  CHECK(s.test_within.size() == 3000);
  CHECK(s.test_transfer.size() == 3000);

  std::set<std::string> train_ids;
  for (const auto& x : s.train) train_ids.insert(x.identity());
  for (const auto& x : s.test_within) CHECK(train_ids.count(x.identity()) == 0);

  const auto& vocab = Vocabulary::instance();
  for (const auto& x : s.test_transfer) {
    for (const auto& w : x.tokens) CHECK(vocab.content_variant(w).value_or(Variant::B) == Variant::B);
  }
  for (const auto& x : s.train) {
    for (const auto& w : x.tokens) CHECK(vocab.content_variant(w).value_or(Variant::A) == Variant::A);
  }

  const auto again = make_splits(1);
  REQUIRE(again.train.size() == s.train.size());
  for (std::size_t i = 0; i < s.train.size(); ++i) CHECK(again.train[i].identity() == s.train[i].identity());
}

TEST_CASE("deep roles are the relative-clause roles") {
  const auto g = build_grammar(Variant::A);
  const auto& rel = g.template_for(Structure::RelativeClause);
  // Relativizer through the embedded object; the matrix verb follows.
  std::set<Role> clause;
  bool inside = false;
  for (const auto& slot : rel.slots) {
    if (slot.role == Role::RelPronoun) inside = true;
    if (inside && slot.role == Role::Verb) inside = false;
    if (inside) clause.insert(slot.role);
  }
  for (Role r : all_roles()) CHECK(is_deep_role(r) == (clause.count(r) == 1));
}

TEST_CASE("corpus files round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "ematrace_test_grammar";
  std::filesystem::create_directories(dir);
  const auto data = generate_dataset(build_grammar(Variant::B), 40, 3);
  write_corpus(dir / "c.txt", data, Variant::B, 3);
  const auto back = read_corpus(dir / "c.txt");
  REQUIRE(back.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(back[i].tokens == data[i].tokens);
    CHECK(back[i].roles == data[i].roles);
    CHECK(back[i].structure == data[i].structure);
  }
  const auto meta = read_meta(meta_path(dir / "c.txt"));
  CHECK(meta.at("seed") == "3");
  std::filesystem::remove_all(dir);
}
