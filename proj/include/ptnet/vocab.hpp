#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace ptnet {

/// Lowercases, strips punctuation, splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);
std::string join_tokens(const std::vector<std::string>& tokens);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& words);

  int id(const std::string& word) const;
  const std::string& word(int id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> encode(std::string_view sentence) const;
  /// Stops at EOS; skips PAD/BOS.
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

}  // namespace ptnet
