#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace xlt {

/// Reserved token ids. The five specials always occupy ids 0-4 in this order.
enum SpecialToken : std::int32_t { kCls = 0, kSep = 1, kPad = 2, kUnk = 3, kMask = 4 };
inline constexpr std::size_t kNumSpecials = 5;
inline constexpr std::array<std::string_view, kNumSpecials> kSpecialTokens{"[CLS]", "[SEP]", "[PAD]", "[UNK]",
                                                                          "[MASK]"};

/// Prefix carried by every subword that continues a word.
inline constexpr std::string_view kContinuation = "##";
inline constexpr std::string_view kReplacementChar = "\xEF\xBF\xBD";

struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
  /// Subword count of the text before truncation (specials excluded).
  std::size_t original_length = 0;

  std::size_t real_length() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }
};

namespace detail {

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

inline bool starts_with_ci(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i)
    if (std::tolower(static_cast<unsigned char>(s[i])) != prefix[i]) return false;
  return true;
}

// Initial symbols of a word: first byte bare, later bytes with "##".
inline std::vector<std::string> word_symbols(std::string_view word) {
  std::vector<std::string> symbols;
  symbols.reserve(word.size());
  for (std::size_t i = 0; i < word.size(); ++i)
    symbols.push_back(i == 0 ? std::string(1, word[i]) : std::string(kContinuation) + word[i]);
  return symbols;
}

inline std::string merged_symbol(const std::string& left, const std::string& right) {
  return left + right.substr(kContinuation.size());
}

inline std::string pair_key(const std::string& left, const std::string& right) { return left + ' ' + right; }

}  // namespace detail

/// Tweet-style normalization: optional ASCII lowercasing, URLs to "URL",
/// @-mentions to "@USER", whitespace collapsed to single spaces.
inline std::string normalize_text(std::string_view text, bool lowercase) {
  std::string out;
  for (auto& word : detail::split_whitespace(text)) {
    if (lowercase)
      for (auto& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (detail::starts_with_ci(word, "http://") || detail::starts_with_ci(word, "https://") ||
        detail::starts_with_ci(word, "www."))
      word = "URL";
    else if (word.size() > 1 && word[0] == '@')
      word = "@USER";
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

/// Shared byte-pair-encoding vocabulary.
///
/// Words are split on whitespace after normalization. Each word starts as a
/// sequence of byte symbols where every byte after the first carries the "##"
/// continuation prefix; merges never cross word boundaries.
class Vocabulary {
 public:
  Vocabulary() {
    for (auto s : kSpecialTokens) add_token(std::string(s));
  }

  /// Learns merges until the vocabulary reaches vocab_size or no pair occurs
  /// at least twice. Pair ties resolve to the lexicographically smallest
  /// (left, right); line order never matters.
  static Vocabulary train(const std::vector<std::string>& corpus, std::size_t vocab_size, bool lowercase = true) {
    if (corpus.empty()) throw std::invalid_argument("train_bpe: empty corpus");
    std::map<std::string, std::size_t> word_freq;
    for (const auto& line : corpus)
      for (auto& w : detail::split_whitespace(normalize_text(line, lowercase))) ++word_freq[w];
    if (word_freq.empty()) throw std::invalid_argument("train_bpe: corpus contains no words");

    std::vector<std::vector<std::string>> words;
    std::vector<std::size_t> freqs;
    std::set<std::string> alphabet;
    for (const auto& [w, f] : word_freq) {
      words.push_back(detail::word_symbols(w));
      freqs.push_back(f);
      alphabet.insert(words.back().begin(), words.back().end());
    }
    if (vocab_size < kNumSpecials + alphabet.size())
      throw std::invalid_argument("train_bpe: vocab_size " + std::to_string(vocab_size) + " is below the " +
                                  std::to_string(kNumSpecials + alphabet.size()) +
                                  " tokens needed for specials and base symbols");

    Vocabulary vocab;
    vocab.lowercase_ = lowercase;
    for (const auto& s : alphabet) vocab.add_token(s);

    using Pair = std::pair<std::string, std::string>;
    std::map<Pair, long long> pair_counts;
    auto count_word = [&](std::size_t w, long long sign) {
      const auto& sym = words[w];
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
        auto& c = pair_counts[{sym[i], sym[i + 1]}];
        c += sign * static_cast<long long>(freqs[w]);
      }
    };
    for (std::size_t w = 0; w < words.size(); ++w) count_word(w, +1);

    while (vocab.size() < vocab_size) {
      const Pair* best = nullptr;
      long long best_count = 1;
      for (const auto& [pair, count] : pair_counts)
        if (count > best_count) {  // map order makes the first maximum the lexicographic minimum
          best = &pair;
          best_count = count;
        }
      if (!best) break;
      const Pair merge = *best;
      const std::string product = detail::merged_symbol(merge.first, merge.second);
      for (std::size_t w = 0; w < words.size(); ++w) {
        auto& sym = words[w];
        bool present = false;
        for (std::size_t i = 0; i + 1 < sym.size(); ++i)
          if (sym[i] == merge.first && sym[i + 1] == merge.second) {
            present = true;
            break;
          }
        if (!present) continue;
        count_word(w, -1);
        std::vector<std::string> merged;
        merged.reserve(sym.size());
        for (std::size_t i = 0; i < sym.size();) {
          if (i + 1 < sym.size() && sym[i] == merge.first && sym[i + 1] == merge.second) {
            merged.push_back(product);
            i += 2;
          } else {
            merged.push_back(sym[i++]);
          }
        }
        sym = std::move(merged);
        count_word(w, +1);
      }
      std::erase_if(pair_counts, [](const auto& kv) { return kv.second <= 0; });
      vocab.add_merge(merge.first, merge.second);
      if (!vocab.find(product)) vocab.add_token(product);
    }
    return vocab;
  }

  std::size_t size() const { return tokens_.size(); }
  bool lowercase() const { return lowercase_; }
  const std::string& token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw std::out_of_range("vocabulary: id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(tokens_.size()));
    return tokens_[id];
  }
  std::optional<std::int32_t> find(std::string_view tok) const {
    auto it = ids_.find(std::string(tok));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  std::string normalize(std::string_view text) const { return normalize_text(text, lowercase_); }

  /// Subword ids of a single (already normalized) word.
  std::vector<std::int32_t> encode_word(std::string_view word) const {
    std::vector<std::string> sym = detail::word_symbols(word);
    while (sym.size() > 1) {
      std::size_t best_rank = merges_.size(), best_at = 0;
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
        auto it = merge_rank_.find(detail::pair_key(sym[i], sym[i + 1]));
        if (it != merge_rank_.end() && it->second < best_rank) {
          best_rank = it->second;
          best_at = i;
        }
      }
      if (best_rank == merges_.size()) break;
      sym[best_at] = detail::merged_symbol(sym[best_at], sym[best_at + 1]);
      sym.erase(sym.begin() + static_cast<std::ptrdiff_t>(best_at) + 1);
    }
    std::vector<std::int32_t> ids;
    ids.reserve(sym.size());
    for (const auto& s : sym) ids.push_back(find(s).value_or(kUnk));
    return ids;
  }

  /// Subword ids of a whole text, without specials or truncation.
  std::vector<std::int32_t> subwords(std::string_view text) const {
    std::vector<std::int32_t> ids;
    for (const auto& w : detail::split_whitespace(normalize(text))) {
      auto piece = encode_word(w);
      ids.insert(ids.end(), piece.begin(), piece.end());
    }
    return ids;
  }

  /// [CLS] subwords [SEP] padded with [PAD] to max_len; keeps the head of long texts.
  TokenSequence encode(std::string_view text, std::size_t max_len) const {
    if (max_len < 3) throw std::invalid_argument("encode: max_len must be at least 3");
    const auto pieces = subwords(text);
    const std::size_t keep = std::min(pieces.size(), max_len - 2);
    TokenSequence seq;
    seq.original_length = pieces.size();
    seq.ids.reserve(max_len);
    seq.ids.push_back(kCls);
    seq.ids.insert(seq.ids.end(), pieces.begin(), pieces.begin() + static_cast<std::ptrdiff_t>(keep));
    seq.ids.push_back(kSep);
    seq.mask.assign(seq.ids.size(), 1);
    seq.ids.resize(max_len, kPad);
    seq.mask.resize(max_len, 0);
    return seq;
  }

  /// Inverse of encode for in-vocabulary text: specials dropped, [UNK]
  /// rendered as U+FFFD, "##" pieces glued to the previous piece.
  std::string decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (auto id : ids) {
      const std::string& tok = token(id);
      if (id == kUnk) {
        if (!out.empty()) out += ' ';
        out += kReplacementChar;
      } else if (static_cast<std::size_t>(id) < kNumSpecials) {
        continue;
      } else if (tok.starts_with(kContinuation)) {
        out += tok.substr(kContinuation.size());
      } else {
        if (!out.empty()) out += ' ';
        out += tok;
      }
    }
    return out;
  }

  /// Line-oriented text form: header, id<TAB>token lines, "#merges", merge pairs.
  std::string serialize() const {
    std::ostringstream os;
    os << "bpe-vocab v1 " << tokens_.size() << " lowercase=" << (lowercase_ ? 1 : 0) << '\n';
    for (std::size_t i = 0; i < tokens_.size(); ++i) os << i << '\t' << tokens_[i] << '\n';
    os << "#merges\n";
    for (const auto& [l, r] : merges_) os << l << ' ' << r << '\n';
    return os.str();
  }

  static Vocabulary parse(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("vocabulary: empty file");
    std::istringstream header(line);
    std::string magic, version, extra;
    std::size_t declared = 0;
    if (!(header >> magic >> version >> declared) || magic != "bpe-vocab")
      throw std::runtime_error("vocabulary: bad header '" + line + "'");
    if (version != "v1") throw std::runtime_error("vocabulary: unsupported version " + version);
    Vocabulary vocab;
    vocab.tokens_.clear();
    vocab.ids_.clear();
    while (header >> extra)
      if (extra == "lowercase=0") vocab.lowercase_ = false;
      else if (extra == "lowercase=1") vocab.lowercase_ = true;
    for (std::size_t i = 0; i < declared; ++i) {
      if (!std::getline(is, line)) throw std::runtime_error("vocabulary: truncated token list");
      const auto tab = line.find('\t');
      if (tab == std::string::npos || std::stoul(line.substr(0, tab)) != i)
        throw std::runtime_error("vocabulary: bad token line " + std::to_string(i + 2));
      vocab.add_token(line.substr(tab + 1));
    }
    for (std::size_t i = 0; i < kNumSpecials; ++i)
      if (vocab.tokens_[i] != kSpecialTokens[i])
        throw std::runtime_error("vocabulary: special token " + std::string(kSpecialTokens[i]) + " not at id " +
                                 std::to_string(i));
    if (!std::getline(is, line) || line != "#merges") throw std::runtime_error("vocabulary: missing #merges");
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos) throw std::runtime_error("vocabulary: bad merge line '" + line + "'");
      vocab.add_merge(line.substr(0, sp), line.substr(sp + 1));
    }
    return vocab;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("vocabulary: cannot write " + path.string());
    os << serialize();
    if (!os) throw std::runtime_error("vocabulary: write failed for " + path.string());
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("vocabulary: cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_ && a.merges_ == b.merges_ && a.lowercase_ == b.lowercase_;
  }

 private:
  void add_token(std::string tok) {
    if (ids_.contains(tok)) throw std::runtime_error("vocabulary: duplicate token '" + tok + "'");
    ids_.emplace(tok, static_cast<std::int32_t>(tokens_.size()));
    tokens_.push_back(std::move(tok));
  }

  void add_merge(std::string left, std::string right) {
    merge_rank_.emplace(detail::pair_key(left, right), merges_.size());
    merges_.emplace_back(std::move(left), std::move(right));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, std::size_t> merge_rank_;
  bool lowercase_ = true;
};

}  // namespace xlt
