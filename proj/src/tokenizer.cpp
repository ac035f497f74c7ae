#include "ematrace/tokenizer.hpp"

#include <algorithm>
#include <stdexcept>

namespace ematrace {

CharTokenizer CharTokenizer::from_text(std::string_view text) {
  std::array<bool, 256> seen{};
  for (char c : text) seen[static_cast<unsigned char>(c)] = true;
  std::string table;
  for (int b = 0; b < 256; ++b) {
    if (seen[static_cast<std::size_t>(b)]) table.push_back(static_cast<char>(b));
  }
  return from_table(table);
}

CharTokenizer CharTokenizer::from_table(std::string_view table) {
  if (table.empty()) throw std::invalid_argument("tokenizer: empty table");
  CharTokenizer t;
  t.table_ = std::string(table);
  t.build_index();
  return t;
}

void CharTokenizer::build_index() {
  id_.fill(-1);
  for (std::size_t i = 0; i < table_.size(); ++i) {
    auto& slot = id_[static_cast<unsigned char>(table_[i])];
    if (slot >= 0) throw std::invalid_argument("tokenizer: duplicate byte in table");
    slot = static_cast<int>(i);
  }
}

std::vector<int> CharTokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const int id = id_[static_cast<unsigned char>(text[i])];
    if (id < 0) {
      throw std::invalid_argument("tokenizer: byte " + std::to_string(static_cast<unsigned char>(text[i])) +
                                  " at offset " + std::to_string(i) + " is not in the vocabulary");
    }
    ids.push_back(id);
  }
  return ids;
}

std::string CharTokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= vocab_size()) throw std::invalid_argument("tokenizer: id out of range");
    out.push_back(table_[static_cast<std::size_t>(id)]);
  }
  return out;
}

}  // namespace ematrace
