#pragma once

// Two-variant template grammar for grammatical role assignment.
//
// Variant A (animals) and variant B (vehicles) share six sentence templates,
// determiners and function words; their content words are disjoint. The full
// lexicon has 147 words and every token carries one of 20 roles.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ematrace::grammar {

enum class Variant : std::uint8_t { A, B };

enum class Structure : std::uint8_t { Transitive, Passive, Ditransitive, RelativeClause, Intransitive, Adverbial };
inline constexpr int kNumStructures = 6;

enum class Category : std::uint8_t {
  Determiner,
  Auxiliary,
  PrepBy,
  PrepTo,
  Relativizer,
  Noun,
  Verb,
  Participle,
  IntransitiveVerb,
  Adjective,
  Adverb,
};

enum class Role : std::uint8_t {
  DetAgent,
  AdjAgent,
  NounAgent,
  Verb,
  DetPatient,
  AdjPatient,
  NounPatient,
  AuxPassive,
  PrepBy,
  DetRecipient,
  NounRecipient,
  PrepTo,
  RelPronoun,
  DetRel,
  NounRel,
  VerbRel,
  AdjRel,
  Adverb,
  DetSubject,
  NounSubject,
};
inline constexpr int kNumRoles = 20;
inline constexpr int kVocabSize = 147;

std::string_view role_name(Role r);
std::optional<Role> role_from_name(std::string_view name);
std::string_view structure_name(Structure s);
std::string_view variant_name(Variant v);
bool is_content(Category c);

// Roles inside the embedded relative clause.
bool is_deep_role(Role r);

const std::array<Role, kNumRoles>& all_roles();

struct Slot {
  Category category;
  Role role;
  bool optional = false;
};

struct SentenceTemplate {
  Structure structure;
  std::vector<Slot> slots;

  bool operator==(const SentenceTemplate& other) const;
};

struct Grammar {
  Variant variant;
  std::map<Category, std::vector<std::string>> lexicon;
  std::vector<SentenceTemplate> templates;
  std::array<Role, kNumRoles> role_set;

  const SentenceTemplate& template_for(Structure s) const;
  std::vector<std::string> words() const;
};

struct LabeledSentence {
  std::vector<std::string> tokens;
  std::vector<Role> roles;
  Structure structure;
  Variant grammar;

  std::string identity() const;  // space-joined tokens
};

struct DatasetSplit {
  std::vector<LabeledSentence> train;
  std::vector<LabeledSentence> test_within;
  std::vector<LabeledSentence> test_transfer;
  std::uint64_t seed = 0;
};

// The lexicon and templates are fixed; the seed is accepted for interface
// symmetry with the generators and does not change the result.
Grammar build_grammar(Variant variant, std::uint64_t seed = 0);

// Structures are exactly balanced (n / 6 each, remainder to the first
// templates) and shuffled; adjectives appear with probability 0.5 per noun
// phrase; words are drawn uniformly within their category.
std::vector<LabeledSentence> generate_dataset(const Grammar& grammar, std::size_t n_sentences, std::uint64_t seed);

// 5000 train (A), 3000 held-out A sentences absent from train, 3000 B.
DatasetSplit make_splits(std::uint64_t seed, std::size_t n_train = 5000, std::size_t n_test = 3000);

std::size_t count_tokens(const std::vector<LabeledSentence>& sentences);

// Index of a word in the shared 147-word vocabulary (function words, then A
// content words, then B content words).
class Vocabulary {
 public:
  static const Vocabulary& instance();
  int index(std::string_view word) const;  // throws on unknown word
  std::optional<int> find(std::string_view word) const;
  const std::string& word(int index) const { return words_.at(static_cast<std::size_t>(index)); }
  int size() const { return static_cast<int>(words_.size()); }
  std::optional<Variant> content_variant(std::string_view word) const;

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::map<std::string, int, std::less<>> index_;
  std::map<std::string, Variant, std::less<>> content_owner_;
};

Structure infer_structure(const std::vector<Role>& roles);

// One sentence per line, `token/role` pairs separated by single spaces.
void write_corpus(const std::filesystem::path& path, const std::vector<LabeledSentence>& sentences,
                  Variant variant, std::uint64_t seed);
std::vector<LabeledSentence> read_corpus(const std::filesystem::path& path);

// Flat key=value sidecar next to a corpus file.
std::filesystem::path meta_path(const std::filesystem::path& corpus);
std::map<std::string, std::string> read_meta(const std::filesystem::path& path);

}  // namespace ematrace::grammar
