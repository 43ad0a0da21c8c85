#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "xlt/datasets.hpp"
#include "xlt/random.hpp"
#include "xlt/tokenizer.hpp"

namespace xlt {

/// Parameters of the synthetic bilingual benchmark.
///
/// Language A is templated pseudo-text; language B is A with every content
/// word replaced through a fixed word-level bijection. Function words and
/// punctuation are shared by both languages.
struct SynthSpec {
  std::uint64_t seed = 2024;
  std::size_t nouns = 40;
  std::size_t neutral_adjectives = 30;
  std::size_t offensive_words = 30;
  std::size_t verbs = 20;
  std::size_t positive_adjectives = 16;
  /// Templates drawn from each template family (capped by what exists).
  std::size_t template_count = 6;
  /// Probability that a sentence uses the template family typical of its class.
  double anchor_bias = 0.65;
  /// Class proportions of the 2-class sets: offensive, non-offensive.
  std::vector<double> balance{0.5, 0.5};
  /// Class proportions of the 3-class sets: overt, covert, non-aggressive.
  std::vector<double> balance3{1.0 / 3, 1.0 / 3, 1.0 / 3};
  std::size_t pretrain_per_language = 3000;
  /// Share of pretraining lines that are code-mixed: each content word is
  /// independently written in either language.
  double code_mix_fraction = 0.5;
  std::size_t a_train = 2000;
  std::size_t b_train = 1200;
  std::size_t b_test = 400;
  std::size_t b3_train = 1200;
  std::size_t b3_test = 450;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("synthetic spec: " + m); };
    auto check_balance = [&](const std::vector<double>& b, std::size_t k, const char* name) {
      if (b.size() != k) fail(std::string(name) + " needs " + std::to_string(k) + " entries");
      double s = 0.0;
      for (double v : b) {
        if (!(v >= 0.0)) fail(std::string(name) + " entries must be non-negative");
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-9) fail(std::string(name) + " entries must sum to 1");
    };
    check_balance(balance, 2, "balance");
    check_balance(balance3, 3, "balance3");
    if (template_count == 0) fail("template_count must be positive");
    if (!(anchor_bias >= 0.0 && anchor_bias <= 1.0)) fail("anchor_bias must be in [0, 1]");
    if (!(code_mix_fraction >= 0.0 && code_mix_fraction <= 1.0)) fail("code_mix_fraction must be in [0, 1]");
    if (pretrain_per_language == 0 || a_train == 0 || b_train == 0 || b_test == 0)
      fail("corpus sizes must be positive");
  }
};

struct SynthCorpus {
  std::vector<std::string> pretrain;  // A and B sentences, unlabeled
  LabeledDataset a_train;
  LabeledDataset b_train;
  LabeledDataset b_test;
  LabeledDataset b3_train;
  LabeledDataset b3_test;
  std::map<std::string, std::string> cipher;  // A word -> B word
};

inline LabelSchema binary_offense_schema(std::string task = "offense") {
  return LabelSchema(std::move(task), {"offensive", "non-offensive"});
}

inline LabelSchema aggression_schema(std::string task = "aggression") {
  return LabelSchema(std::move(task), {"overtly-aggressive", "covertly-aggressive", "non-aggressive"});
}

namespace synth {

// Slot markers: N noun, A neutral adjective, X target word (offensive word in
// offensive sentences, neutral adjective otherwise), V verb, P positive adjective.
inline constexpr std::array<std::string_view, 8> kAggressiveTemplates{
    "you are such a {X} {N} !",        "shut up you {X} {N}",          "you {X} {N} , get out !",
    "what a {X} {N} you are !",        "you {V} like a {X} {N} !",     "stop being so {X} , you {N} !",
    "nobody likes your {X} {N} !",     "go away , {X} {N} !"};
inline constexpr std::array<std::string_view, 8> kCalmTemplates{
    "i think the {N} is {X} .",        "the {A} {N} {V} the {X} {N} .", "my {N} was {X} today .",
    "this {N} looks {X} and {A} .",    "they {V} the {N} , it was {X} .", "we saw a {X} {N} near the {N} .",
    "the {N} and the {N} are {X} .",   "her {N} seems {X} to me ."};
inline constexpr std::array<std::string_view, 6> kCovertTemplates{
    "oh great , another {P} {N} from you .", "yeah right , your {N} is so {P} .",
    "your {N} is not {P} at all , is it ?",  "sure , your {N} is very {P} .",
    "wow , such a {P} {N} , not .",          "nice job , as {P} as your {N} ."};

inline std::string pseudo_word(Rng& rng, std::string_view consonants, std::string_view vowels, std::size_t syllables) {
  std::string w;
  for (std::size_t i = 0; i < syllables; ++i) {
    w += consonants[rng() % consonants.size()];
    w += vowels[rng() % vowels.size()];
  }
  if (rng() % 2) w += consonants[rng() % consonants.size()];
  return w;
}

inline std::vector<std::string> make_lexicon(Rng& rng, std::size_t n, std::string_view consonants,
                                             std::string_view vowels, std::set<std::string>& taken) {
  std::vector<std::string> out;
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > 100000) throw std::runtime_error("synthetic: cannot draw enough distinct pseudo-words");
    auto w = pseudo_word(rng, consonants, vowels, 2 + rng() % 2);
    if (taken.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

inline std::size_t slot_count(std::string_view tpl, std::string_view slot) {
  std::size_t n = 0;
  for (auto pos = tpl.find(slot); pos != std::string_view::npos; pos = tpl.find(slot, pos + 1)) ++n;
  return n;
}

inline void add_function_words(std::string_view tpl, std::set<std::string>& words) {
  for (const auto& w : detail::split_whitespace(tpl))
    if (w.front() != '{') words.insert(w);
}

enum class Kind { kOffensive, kNeutral, kCovert };

struct Lexicons {
  std::vector<std::string> nouns, neutral, offensive, verbs, positive;
};

class Generator {
 public:
  explicit Generator(const SynthSpec& spec) : spec_(spec), rng_(derive_seed(spec.seed, 100)) {
    spec.validate();
    Rng lex_rng(derive_seed(spec.seed, 101));
    std::set<std::string> taken;  // function words stay shared and never become content words
    for (auto tpl : kAggressiveTemplates) add_function_words(tpl, taken);
    for (auto tpl : kCalmTemplates) add_function_words(tpl, taken);
    for (auto tpl : kCovertTemplates) add_function_words(tpl, taken);
    constexpr std::string_view kConsA = "bdfgklmnprstv", kVowA = "aeiou";
    lex_.nouns = make_lexicon(lex_rng, spec.nouns, kConsA, kVowA, taken);
    lex_.neutral = make_lexicon(lex_rng, spec.neutral_adjectives, kConsA, kVowA, taken);
    lex_.offensive = make_lexicon(lex_rng, spec.offensive_words, kConsA, kVowA, taken);
    lex_.verbs = make_lexicon(lex_rng, spec.verbs, kConsA, kVowA, taken);
    lex_.positive = make_lexicon(lex_rng, spec.positive_adjectives, kConsA, kVowA, taken);

    aggressive_.assign(kAggressiveTemplates.begin(),
                       kAggressiveTemplates.begin() + std::min(spec.template_count, kAggressiveTemplates.size()));
    calm_.assign(kCalmTemplates.begin(), kCalmTemplates.begin() + std::min(spec.template_count, kCalmTemplates.size()));
    covert_.assign(kCovertTemplates.begin(),
                   kCovertTemplates.begin() + std::min(spec.template_count, kCovertTemplates.size()));
    check_lexicon_sizes();

    // Cipher: every content word of A gets a distinct B pseudo-word.
    constexpr std::string_view kConsB = "chjqwxzy", kVowB = "aeiouy";
    std::vector<std::string> content;
    for (auto* lex : {&lex_.nouns, &lex_.neutral, &lex_.offensive, &lex_.verbs, &lex_.positive})
      content.insert(content.end(), lex->begin(), lex->end());
    auto b_words = make_lexicon(lex_rng, content.size(), kConsB, kVowB, taken);
    deterministic_shuffle(b_words, lex_rng);
    for (std::size_t i = 0; i < content.size(); ++i) cipher_[content[i]] = b_words[i];
  }

  const std::map<std::string, std::string>& cipher() const { return cipher_; }

  /// A-language sentence of the given kind, unique across this generator.
  std::string sentence(Kind kind) {
    for (std::size_t attempt = 0; attempt < 10000; ++attempt) {
      std::string s = fill(pick_template(kind), kind);
      if (used_.insert(s).second) return s;
    }
    throw std::runtime_error("synthetic: lexicons too small to draw enough distinct sentences");
  }

  std::string to_b(const std::string& a_sentence) const {
    std::string out;
    for (const auto& w : detail::split_whitespace(a_sentence)) {
      if (!out.empty()) out += ' ';
      auto it = cipher_.find(w);
      out += it == cipher_.end() ? w : it->second;
    }
    return out;
  }

  /// Each content word independently switched to B with probability 1/2.
  std::string code_mix(const std::string& a_sentence) {
    std::string out;
    for (const auto& w : detail::split_whitespace(a_sentence)) {
      if (!out.empty()) out += ' ';
      auto it = cipher_.find(w);
      out += it != cipher_.end() && rng_() % 2 ? it->second : w;
    }
    return out;
  }

  Rng& rng() { return rng_; }

 private:
  void check_lexicon_sizes() const {
    auto need = [&](const std::vector<std::string_view>& tpls, std::string_view slot) {
      std::size_t n = 0;
      for (auto t : tpls) n = std::max(n, slot_count(t, slot));
      return n;
    };
    std::vector<std::string_view> all;
    all.insert(all.end(), aggressive_.begin(), aggressive_.end());
    all.insert(all.end(), calm_.begin(), calm_.end());
    all.insert(all.end(), covert_.begin(), covert_.end());
    auto require = [&](std::string_view slot, std::size_t have, const char* what) {
      const std::size_t n = need(all, slot);
      if (have < std::max<std::size_t>(n, 1))
        throw std::invalid_argument(std::string("synthetic spec: ") + what + " lexicon has " + std::to_string(have) +
                                    " words but templates need " + std::to_string(std::max<std::size_t>(n, 1)));
    };
    require("{N}", lex_.nouns.size(), "noun");
    require("{A}", lex_.neutral.size(), "neutral adjective");
    require("{X}", lex_.offensive.size(), "offensive");
    require("{V}", lex_.verbs.size(), "verb");
    require("{P}", lex_.positive.size(), "positive adjective");
  }

  std::string_view pick_template(Kind kind) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (kind == Kind::kCovert) return covert_[rng_() % covert_.size()];
    const bool typical = u(rng_) < spec_.anchor_bias;
    const bool aggressive = (kind == Kind::kOffensive) == typical;
    const auto& family = aggressive ? aggressive_ : calm_;
    return family[rng_() % family.size()];
  }

  std::string draw(const std::vector<std::string>& lex, std::vector<std::string>& used_here) {
    for (;;) {
      const auto& w = lex[rng_() % lex.size()];
      if (std::find(used_here.begin(), used_here.end(), w) == used_here.end() || used_here.size() >= lex.size()) {
        used_here.push_back(w);
        return w;
      }
    }
  }

  std::string fill(std::string_view tpl, Kind kind) {
    std::string out;
    std::vector<std::string> used_here;
    for (std::size_t i = 0; i < tpl.size();) {
      if (tpl[i] == '{' && i + 2 < tpl.size() && tpl[i + 2] == '}') {
        switch (tpl[i + 1]) {
          case 'N': out += draw(lex_.nouns, used_here); break;
          case 'A': out += draw(lex_.neutral, used_here); break;
          case 'V': out += draw(lex_.verbs, used_here); break;
          case 'P': out += draw(lex_.positive, used_here); break;
          case 'X': out += draw(kind == Kind::kOffensive ? lex_.offensive : lex_.neutral, used_here); break;
          default: throw std::logic_error("synthetic: bad template slot");
        }
        i += 3;
      } else {
        out += tpl[i++];
      }
    }
    return out;
  }

  SynthSpec spec_;
  Rng rng_;
  Lexicons lex_;
  std::vector<std::string_view> aggressive_, calm_, covert_;
  std::map<std::string, std::string> cipher_;
  std::unordered_set<std::string> used_;
};

/// Class counts for n instances under the given proportions (largest remainder).
inline std::vector<std::size_t> class_sizes(const std::vector<double>& balance, std::size_t n) {
  std::vector<std::size_t> scaled;
  for (double b : balance) scaled.push_back(static_cast<std::size_t>(std::llround(b * 1e9)));
  return proportional_quotas(scaled, n);
}

}  // namespace synth

/// Builds the pretraining corpus (A and B) and the labeled A/B sets. All
/// sentences are distinct, so B test sentences never occur in any training
/// or pretraining corpus.
inline SynthCorpus generate_synthetic_bilingual(const SynthSpec& spec) {
  synth::Generator gen(spec);
  SynthCorpus out;
  out.cipher = gen.cipher();

  auto labeled = [&](std::size_t n, bool three_class, bool to_b, const std::string& prefix) {
    LabeledDataset ds;
    ds.schema = three_class ? aggression_schema() : binary_offense_schema();
    ds.provenance = "synthetic:" + prefix;
    const auto sizes = synth::class_sizes(three_class ? spec.balance3 : spec.balance, n);
    std::vector<std::int32_t> labels;
    for (std::size_t c = 0; c < sizes.size(); ++c) labels.insert(labels.end(), sizes[c], static_cast<std::int32_t>(c));
    deterministic_shuffle(labels, gen.rng());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      synth::Kind kind;
      if (three_class)
        kind = labels[i] == 0 ? synth::Kind::kOffensive : labels[i] == 1 ? synth::Kind::kCovert : synth::Kind::kNeutral;
      else
        kind = labels[i] == 0 ? synth::Kind::kOffensive : synth::Kind::kNeutral;
      std::string s = gen.sentence(kind);
      char id[64];
      std::snprintf(id, sizeof id, "%s-%06zu", prefix.c_str(), i + 1);
      ds.instances.push_back({id, to_b ? gen.to_b(s) : s, labels[i]});
    }
    return ds;
  };

  out.b_test = labeled(spec.b_test, false, true, "b-test");
  if (spec.b3_test) out.b3_test = labeled(spec.b3_test, true, true, "b3-test");
  out.a_train = labeled(spec.a_train, false, false, "a-train");
  out.b_train = labeled(spec.b_train, false, true, "b-train");
  if (spec.b3_train) out.b3_train = labeled(spec.b3_train, true, true, "b3-train");

  // Unlabeled text mixes all three sentence kinds.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int lang = 0; lang < 2; ++lang)
    for (std::size_t i = 0; i < spec.pretrain_per_language; ++i) {
      const auto kind = static_cast<synth::Kind>(i % 3);
      std::string s = gen.sentence(kind);
      if (u(gen.rng()) < spec.code_mix_fraction)
        out.pretrain.push_back(gen.code_mix(s));
      else
        out.pretrain.push_back(lang == 0 ? s : gen.to_b(s));
    }
  return out;
}

}  // namespace xlt
