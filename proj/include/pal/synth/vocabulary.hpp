#pragma once

#include <array>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pal::synth {

inline constexpr int kVocabSize = 64;
inline constexpr int kNumClasses = 16;

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kQuestion = 3;
inline constexpr int kAnswer = 4;
inline constexpr int kClassBase = 5;    // c0..c15
inline constexpr int kCountBase = 21;   // zero..three
inline constexpr int kOrdinalBase = 25; // first..fourth
inline constexpr int kFillerBase = 29;

inline constexpr int class_token(int c) { return kClassBase + c; }
inline constexpr int count_token(int n) { return kCountBase + n; }
inline constexpr int ordinal_token(int i) { return kOrdinalBase + i; }
inline constexpr bool is_class_token(int id) { return id >= kClassBase && id < kClassBase + kNumClasses; }

// Fixed 64-word vocabulary. Ids never change between runs.
class Vocabulary {
 public:
  static const Vocabulary& instance() {
    static const Vocabulary v;
    return v;
  }

  std::size_t size() const { return words_.size(); }

  std::string_view word(int id) const {
    if (id < 0 || id >= kVocabSize) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    return words_[static_cast<std::size_t>(id)];
  }

  int id(std::string_view w) const {
    auto it = index_.find(std::string(w));
    if (it == index_.end()) throw std::invalid_argument("unknown word '" + std::string(w) + "'");
    return it->second;
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    std::istringstream is{std::string(text)};
    std::string w;
    while (is >> w) out.push_back(id(w));
    return out;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

 private:
  Vocabulary() {
    words_ = {"<pad>", "<bos>", "<eos>", "<q>", "<a>"};
    for (int c = 0; c < kNumClasses; ++c) words_.push_back("c" + std::to_string(c));
    for (const char* w : {"zero", "one", "two", "three"}) words_.emplace_back(w);
    for (const char* w : {"first", "second", "third", "fourth"}) words_.emplace_back(w);
    for (const char* w : {"you", "are", "an", "audio", "assistant", "listen", "which", "sound", "is", "heard",
                          "in", "the", "clip", "what", "happens", "how", "many", "events", "occur", "there",
                          "name", "class", "of", "this", "recording", "answer", "briefly", "please", "count",
                          "label", "tell", "me", "was", "played", "now"}) {
      words_.emplace_back(w);
    }
    if (words_.size() != static_cast<std::size_t>(kVocabSize)) throw std::logic_error("vocabulary size drifted");
    for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<int>(i));
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace pal::synth
