#include "ematrace/grammar.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace ematrace::grammar {

namespace {

constexpr std::array<std::string_view, kNumRoles> kRoleNames = {
    "det_agent",     "adj_agent",      "noun_agent", "verb",        "det_patient",
    "adj_patient",   "noun_patient",   "aux_passive", "prep_by",    "det_recipient",
    "noun_recipient", "prep_to",       "rel_pronoun", "det_rel",    "noun_rel",
    "verb_rel",      "adj_rel",        "adverb",     "det_subject", "noun_subject",
};

using Lexicon = std::map<Category, std::vector<std::string>>;

const Lexicon& function_words() {
  static const Lexicon lex = {
      {Category::Determiner, {"the", "a"}},
      {Category::Auxiliary, {"is", "was"}},
      {Category::PrepBy, {"by"}},
      {Category::PrepTo, {"to"}},
      {Category::Relativizer, {"that", "which"}},
  };
  return lex;
}

const Lexicon& content_words(Variant v) {
  static const Lexicon animals = {
      {Category::Noun, {"cat",  "dog",   "bird", "mouse", "horse", "cow",    "pig",  "sheep", "goat",
                        "duck", "fox",   "wolf", "bear",  "lion",  "tiger",  "rabbit", "frog", "owl",
                        "hen",  "deer",  "goose", "mole", "seal",  "crow",   "lamb"}},
      {Category::Verb, {"chases", "sees", "bites", "follows", "likes", "watches", "hunts", "licks", "feeds",
                        "scares", "finds", "hears"}},
      {Category::Participle, {"chased", "seen", "bitten", "followed", "liked", "watched", "hunted", "licked",
                              "fed", "scared", "found", "heard"}},
      {Category::IntransitiveVerb, {"sleeps", "runs", "jumps", "sings", "barks", "swims", "hides", "eats"}},
      {Category::Adjective, {"big", "small", "old", "young", "brown", "furry", "lazy", "wild"}},
      {Category::Adverb, {"quickly", "slowly", "quietly", "happily", "often"}},
  };
  static const Lexicon vehicles = {
      {Category::Noun, {"car",   "bus",   "bike",  "truck",   "van",     "train", "tram",  "boat",  "ship",
                        "plane", "jeep",  "taxi",  "cab",     "lorry",   "wagon", "scooter", "tractor", "yacht",
                        "ferry", "kart",  "sedan", "coupe",   "rocket",  "barge", "cart"}},
      {Category::Verb, {"passes", "tows", "pulls", "hits", "blocks", "overtakes", "bumps", "drags", "carries",
                        "lifts", "rams", "parks"}},
      {Category::Participle, {"passed", "towed", "pulled", "hit", "blocked", "overtaken", "bumped", "dragged",
                              "carried", "lifted", "rammed", "parked"}},
      {Category::IntransitiveVerb, {"stops", "honks", "turns", "speeds", "stalls", "idles", "brakes", "moves"}},
      {Category::Adjective, {"fast", "red", "new", "rusty", "shiny", "heavy", "blue", "noisy"}},
      {Category::Adverb, {"loudly", "smoothly", "rarely", "safely"}},
  };
  return v == Variant::A ? animals : vehicles;
}

std::vector<SentenceTemplate> make_templates() {
  using C = Category;
  using R = Role;
  const Slot det_agent{C::Determiner, R::DetAgent};
  const Slot adj_agent{C::Adjective, R::AdjAgent, true};
  const Slot noun_agent{C::Noun, R::NounAgent};
  const Slot det_patient{C::Determiner, R::DetPatient};
  const Slot adj_patient{C::Adjective, R::AdjPatient, true};
  const Slot noun_patient{C::Noun, R::NounPatient};
  const Slot verb{C::Verb, R::Verb};

  return {
      {Structure::Transitive, {det_agent, adj_agent, noun_agent, verb, det_patient, adj_patient, noun_patient}},
      {Structure::Passive,
       {det_patient, adj_patient, noun_patient, {C::Auxiliary, R::AuxPassive}, {C::Participle, R::Verb},
        {C::PrepBy, R::PrepBy}, det_agent, adj_agent, noun_agent}},
      {Structure::Ditransitive,
       {det_agent, adj_agent, noun_agent, verb, det_patient, adj_patient, noun_patient, {C::PrepTo, R::PrepTo},
        {C::Determiner, R::DetRecipient}, {C::Noun, R::NounRecipient}}},
      {Structure::RelativeClause,
       {det_agent, adj_agent, noun_agent, {C::Relativizer, R::RelPronoun}, {C::Verb, R::VerbRel},
        {C::Determiner, R::DetRel}, {C::Adjective, R::AdjRel, true}, {C::Noun, R::NounRel}, verb, det_patient,
        adj_patient, noun_patient}},
      {Structure::Intransitive,
       {{C::Determiner, R::DetSubject}, {C::Noun, R::NounSubject}, {C::IntransitiveVerb, R::Verb}}},
      {Structure::Adverbial,
       {{C::Determiner, R::DetSubject}, {C::Noun, R::NounSubject}, {C::IntransitiveVerb, R::Verb},
        {C::Adverb, R::Adverb}}},
  };
}

LabeledSentence sample_sentence(const Grammar& g, Structure s, std::mt19937_64& rng) {
  const SentenceTemplate& tpl = g.template_for(s);
  LabeledSentence out;
  out.structure = s;
  out.grammar = g.variant;
  std::bernoulli_distribution keep_optional(0.5);
  for (const Slot& slot : tpl.slots) {
    if (slot.optional && !keep_optional(rng)) continue;
    const auto& words = g.lexicon.at(slot.category);
    std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
    out.tokens.push_back(words[pick(rng)]);
    out.roles.push_back(slot.role);
  }
  return out;
}

std::vector<Structure> balanced_schedule(std::size_t n, std::mt19937_64& rng) {
  std::vector<Structure> schedule(n);
  for (std::size_t i = 0; i < n; ++i) schedule[i] = static_cast<Structure>(i % kNumStructures);
  std::shuffle(schedule.begin(), schedule.end(), rng);
  return schedule;
}

}  // namespace

std::string_view role_name(Role r) { return kRoleNames[static_cast<std::size_t>(r)]; }

std::optional<Role> role_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kRoleNames.size(); ++i) {
    if (kRoleNames[i] == name) return static_cast<Role>(i);
  }
  return std::nullopt;
}

std::string_view structure_name(Structure s) {
  static constexpr std::array<std::string_view, kNumStructures> names = {
      "transitive", "passive", "ditransitive", "relative_clause", "intransitive", "adverbial"};
  return names[static_cast<std::size_t>(s)];
}

std::string_view variant_name(Variant v) { return v == Variant::A ? "A" : "B"; }

bool is_content(Category c) {
  switch (c) {
    case Category::Noun:
    case Category::Verb:
    case Category::Participle:
    case Category::IntransitiveVerb:
    case Category::Adjective:
    case Category::Adverb:
      return true;
    default:
      return false;
  }
}

bool is_deep_role(Role r) {
  switch (r) {
    case Role::RelPronoun:
    case Role::VerbRel:
    case Role::DetRel:
    case Role::AdjRel:
    case Role::NounRel:
      return true;
    default:
      return false;
  }
}

const std::array<Role, kNumRoles>& all_roles() {
  static const std::array<Role, kNumRoles> roles = [] {
    std::array<Role, kNumRoles> r{};
    for (int i = 0; i < kNumRoles; ++i) r[static_cast<std::size_t>(i)] = static_cast<Role>(i);
    return r;
  }();
  return roles;
}

bool SentenceTemplate::operator==(const SentenceTemplate& other) const {
  if (structure != other.structure || slots.size() != other.slots.size()) return false;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const Slot& a = slots[i];
    const Slot& b = other.slots[i];
    if (a.category != b.category || a.role != b.role || a.optional != b.optional) return false;
  }
  return true;
}

const SentenceTemplate& Grammar::template_for(Structure s) const {
  for (const auto& t : templates) {
    if (t.structure == s) return t;
  }
  throw std::logic_error("grammar has no template for structure");
}

std::vector<std::string> Grammar::words() const {
  std::vector<std::string> out;
  for (const auto& [cat, ws] : lexicon) out.insert(out.end(), ws.begin(), ws.end());
  return out;
}

std::string LabeledSentence::identity() const {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += tokens[i];
  }
  return s;
}

Grammar build_grammar(Variant variant, std::uint64_t /*seed*/) {
  Grammar g;
  g.variant = variant;
  g.lexicon = function_words();
  for (const auto& [cat, ws] : content_words(variant)) g.lexicon[cat] = ws;
  g.templates = make_templates();
  g.role_set = all_roles();
  return g;
}

std::vector<LabeledSentence> generate_dataset(const Grammar& grammar, std::size_t n_sentences, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto schedule = balanced_schedule(n_sentences, rng);
  std::vector<LabeledSentence> out;
  out.reserve(n_sentences);
  for (Structure s : schedule) out.push_back(sample_sentence(grammar, s, rng));
  return out;
}

DatasetSplit make_splits(std::uint64_t seed, std::size_t n_train, std::size_t n_test) {
  const Grammar a = build_grammar(Variant::A, seed);
  const Grammar b = build_grammar(Variant::B, seed);

  DatasetSplit split;
  split.seed = seed;
  // Independent streams per split so that changing one size leaves the
  // others unchanged.
  std::seed_seq seq_train{seed, std::uint64_t{1}};
  std::seed_seq seq_within{seed, std::uint64_t{2}};
  std::seed_seq seq_transfer{seed, std::uint64_t{3}};
  std::mt19937_64 rng_train(seq_train);
  std::mt19937_64 rng_within(seq_within);
  std::mt19937_64 rng_transfer(seq_transfer);

  for (Structure s : balanced_schedule(n_train, rng_train)) split.train.push_back(sample_sentence(a, s, rng_train));

  std::unordered_set<std::string> seen;
  for (const auto& s : split.train) seen.insert(s.identity());
  for (Structure s : balanced_schedule(n_test, rng_within)) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw std::runtime_error("make_splits: cannot find unseen sentence");
      LabeledSentence cand = sample_sentence(a, s, rng_within);
      if (!seen.count(cand.identity())) {
        split.test_within.push_back(std::move(cand));
        break;
      }
    }
  }

  for (Structure s : balanced_schedule(n_test, rng_transfer)) {
    split.test_transfer.push_back(sample_sentence(b, s, rng_transfer));
  }
  return split;
}

std::size_t count_tokens(const std::vector<LabeledSentence>& sentences) {
  std::size_t n = 0;
  for (const auto& s : sentences) n += s.tokens.size();
  return n;
}

Vocabulary::Vocabulary() {
  auto add = [&](const std::string& w) {
    if (index_.count(w)) throw std::logic_error("duplicate word in lexicon: " + w);
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  };
  for (const auto& [cat, ws] : function_words()) {
    for (const auto& w : ws) add(w);
  }
  for (Variant v : {Variant::A, Variant::B}) {
    for (const auto& [cat, ws] : content_words(v)) {
      for (const auto& w : ws) {
        add(w);
        content_owner_.emplace(w, v);
      }
    }
  }
}

const Vocabulary& Vocabulary::instance() {
  static const Vocabulary v;
  return v;
}

std::optional<int> Vocabulary::find(std::string_view word) const {
  auto it = index_.find(word);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::index(std::string_view word) const {
  auto i = find(word);
  if (!i) throw std::invalid_argument("unknown word: " + std::string(word));
  return *i;
}

std::optional<Variant> Vocabulary::content_variant(std::string_view word) const {
  auto it = content_owner_.find(word);
  if (it == content_owner_.end()) return std::nullopt;
  return it->second;
}

Structure infer_structure(const std::vector<Role>& roles) {
  auto has = [&](Role r) { return std::find(roles.begin(), roles.end(), r) != roles.end(); };
  if (has(Role::AuxPassive)) return Structure::Passive;
  if (has(Role::PrepTo)) return Structure::Ditransitive;
  if (has(Role::RelPronoun)) return Structure::RelativeClause;
  if (has(Role::Adverb)) return Structure::Adverbial;
  if (has(Role::DetSubject)) return Structure::Intransitive;
  return Structure::Transitive;
}

std::filesystem::path meta_path(const std::filesystem::path& corpus) {
  auto p = corpus;
  p += ".meta";
  return p;
}

void write_corpus(const std::filesystem::path& path, const std::vector<LabeledSentence>& sentences,
                  Variant variant, std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus: " + path.string());
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (i) out << ' ';
      out << s.tokens[i] << '/' << role_name(s.roles[i]);
    }
    out << '\n';
  }
  std::ofstream meta(meta_path(path), std::ios::binary);
  meta << "variant=" << variant_name(variant) << '\n'
       << "seed=" << seed << '\n'
       << "sentences=" << sentences.size() << '\n'
       << "tokens=" << count_tokens(sentences) << '\n';
}

std::vector<LabeledSentence> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus: " + path.string());
  const auto& vocab = Vocabulary::instance();
  std::vector<LabeledSentence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    LabeledSentence s;
    std::istringstream ls(line);
    std::string pair;
    std::optional<Variant> variant;
    while (ls >> pair) {
      const auto slash = pair.rfind('/');
      if (slash == std::string::npos) {
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": malformed token '" + pair + "'");
      }
      std::string word = pair.substr(0, slash);
      auto role = role_from_name(std::string_view(pair).substr(slash + 1));
      if (!role || !vocab.find(word)) {
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": unknown token '" + pair + "'");
      }
      if (auto v = vocab.content_variant(word)) variant = v;
      s.tokens.push_back(std::move(word));
      s.roles.push_back(*role);
    }
    s.structure = infer_structure(s.roles);
    s.grammar = variant.value_or(Variant::A);
    out.push_back(std::move(s));
  }
  return out;
}

std::map<std::string, std::string> read_meta(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read metadata: " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace ematrace::grammar
