#pragma once

// Byte-level character tokenizer. The table is the sorted set of bytes seen
// in the text it was built from; encoding any other byte throws.

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace ematrace {

class CharTokenizer {
 public:
  CharTokenizer() = default;
  static CharTokenizer from_text(std::string_view text);
  // Inverse of table(): the raw bytes in id order.
  static CharTokenizer from_table(std::string_view table);

  int vocab_size() const { return static_cast<int>(table_.size()); }
  const std::string& table() const { return table_; }
  bool contains(char c) const { return id_[static_cast<unsigned char>(c)] >= 0; }

  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  void build_index();
  std::string table_;
  std::array<int, 256> id_{};
};

}  // namespace ematrace
