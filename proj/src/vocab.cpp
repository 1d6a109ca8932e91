#include "ptnet/vocab.hpp"

#include <cctype>
#include <sstream>

#include "ptnet/errors.hpp"

namespace ptnet {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (std::ispunct(c)) {
      continue;
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  for (const char* special : {"<pad>", "<bos>", "<eos>", "<unk>"}) {
    index_[special] = static_cast<int>(words_.size());
    words_.emplace_back(special);
  }
  for (const auto& w : words) {
    if (index_.count(w)) continue;
    index_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
  }
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw ConfigError("vocabulary: id out of range");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view sentence) const {
  std::vector<int> ids;
  for (const auto& t : tokenize(sentence)) ids.push_back(id(t));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> words;
  for (int i : ids) {
    if (i == kEos) break;
    if (i == kPad || i == kBos) continue;
    words.push_back(word(i));
  }
  return join_tokens(words);
}

}  // namespace ptnet
