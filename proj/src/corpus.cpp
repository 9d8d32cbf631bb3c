#include "sbn/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <iterator>

#include "sbn/error.hpp"

namespace sbn {

Corpus Corpus::from_text(const std::string& text, double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("validation fraction must be in (0, 1)");
  if (text.size() < 16) throw ConfigError("corpus is too small");
  Corpus c;
  std::array<bool, 256> seen{};
  for (unsigned char ch : text) seen[ch] = true;
  for (int b = 0; b < 256; ++b) {
    c.lookup_[b] = -1;
    if (seen[static_cast<std::size_t>(b)]) {
      c.lookup_[b] = static_cast<std::int32_t>(c.alphabet_.size());
      c.alphabet_.push_back(static_cast<char>(b));
    }
  }
  const auto all = c.encode(text);
  const auto split = all.size() - static_cast<std::size_t>(static_cast<double>(all.size()) * val_fraction);
  c.train_.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(split));
  c.val_.assign(all.begin() + static_cast<std::ptrdiff_t>(split), all.end());
  return c;
}

Corpus Corpus::load(const std::filesystem::path& path, double val_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open corpus '" + path.string() + "'");
  return from_text(std::string(std::istreambuf_iterator<char>(in), {}), val_fraction);
}

std::vector<std::int32_t> Corpus::encode(const std::string& text) const {
  std::vector<std::int32_t> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto id = lookup_[static_cast<unsigned char>(text[i])];
    if (id < 0) throw ConfigError("character outside the corpus alphabet");
    ids[i] = id;
  }
  return ids;
}

std::string Corpus::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= alphabet_.size())
      throw ConfigError("token id " + std::to_string(id) + " outside the alphabet");
    out.push_back(alphabet_[static_cast<std::size_t>(id)]);
  }
  return out;
}

Batch sample_batch(const std::vector<std::int32_t>& ids, std::size_t batch, std::size_t seq, Rng& rng) {
  if (ids.size() < seq + 2) throw ConfigError("split is shorter than one context window");
  Batch b{batch, seq, std::vector<std::int32_t>(batch * seq), std::vector<std::int32_t>(batch * seq)};
  for (std::size_t r = 0; r < batch; ++r) {
    const auto start = static_cast<std::size_t>(rng.below(ids.size() - seq));
    std::copy_n(ids.begin() + static_cast<std::ptrdiff_t>(start), seq, b.inputs.begin() + static_cast<std::ptrdiff_t>(r * seq));
    std::copy_n(ids.begin() + static_cast<std::ptrdiff_t>(start + 1), seq, b.targets.begin() + static_cast<std::ptrdiff_t>(r * seq));
  }
  return b;
}

std::vector<Batch> fixed_batches(const std::vector<std::int32_t>& ids, std::size_t count,
                                 std::size_t batch, std::size_t seq) {
  if (ids.size() < seq + 2) throw ConfigError("split is shorter than one context window");
  const std::size_t windows = count * batch;
  const std::size_t span = ids.size() - seq - 1;
  std::vector<Batch> out;
  for (std::size_t c = 0; c < count; ++c) {
    Batch b{batch, seq, std::vector<std::int32_t>(batch * seq), std::vector<std::int32_t>(batch * seq)};
    for (std::size_t r = 0; r < batch; ++r) {
      const std::size_t w = c * batch + r;
      const std::size_t start = windows > 1 ? w * span / (windows - 1) : 0;
      std::copy_n(ids.begin() + static_cast<std::ptrdiff_t>(start), seq, b.inputs.begin() + static_cast<std::ptrdiff_t>(r * seq));
      std::copy_n(ids.begin() + static_cast<std::ptrdiff_t>(start + 1), seq, b.targets.begin() + static_cast<std::ptrdiff_t>(r * seq));
    }
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

using Words = std::vector<const char*>;

const Words kNames = {"Anna", "Tom", "Marta", "Felix", "Ruth", "Oskar", "Clara", "Hugo",
                      "Ida", "Peter", "Lena", "Simon", "Edith", "Jonas", "Nora", "Walter"};
const Words kNouns = {"river", "house", "garden", "letter", "window", "road", "horse", "child",
                      "teacher", "village", "forest", "table", "door", "mountain", "boat", "friend",
                      "market", "bridge", "lamp", "book", "stone", "bird", "field", "winter",
                      "morning", "kitchen", "doctor", "farmer", "soldier", "storm", "candle",
                      "train", "station", "island", "garden", "song", "picture", "letter", "hill",
                      "church", "school", "shop", "coat", "basket", "apple", "bottle", "clock",
                      "sister", "brother", "mother", "father", "king", "queen", "sailor", "wall"};
const Words kAdjectives = {"old", "small", "green", "quiet", "dark", "bright", "cold", "long",
                           "heavy", "little", "warm", "strange", "empty", "wooden", "broken",
                           "happy", "tired", "young", "distant", "narrow", "silver", "gentle"};
// Present third-person form and past form.
const std::vector<std::pair<const char*, const char*>> kVerbs = {
    {"sees", "saw"},         {"finds", "found"},     {"carries", "carried"},
    {"opens", "opened"},     {"watches", "watched"}, {"follows", "followed"},
    {"remembers", "remembered"}, {"paints", "painted"}, {"builds", "built"},
    {"takes", "took"},       {"leaves", "left"},     {"keeps", "kept"},
    {"writes", "wrote"},     {"holds", "held"},      {"brings", "brought"},
    {"loves", "loved"},      {"closes", "closed"},   {"buys", "bought"},
    {"reads", "read"},       {"hears", "heard"}};
const std::vector<std::pair<const char*, const char*>> kIntransitive = {
    {"sleeps", "slept"}, {"waits", "waited"},   {"sings", "sang"},
    {"walks", "walked"}, {"laughs", "laughed"}, {"listens", "listened"},
    {"runs", "ran"},     {"stays", "stayed"},   {"returns", "returned"}};
const Words kPrepositions = {"near", "under", "behind", "across", "beside", "through", "above",
                             "along", "inside", "beyond"};
const Words kAdverbs = {"slowly", "again", "quietly", "today", "at last", "once more", "suddenly",
                        "carefully", "every day", "in the evening"};
const Words kConnectives = {"and", "but", "because", "while", "so", "when"};
const Words kSpeech = {"said", "asked", "whispered", "answered", "called"};

class Grammar {
 public:
  explicit Grammar(std::uint64_t seed) : rng_(seed) {}

  std::string paragraph() {
    std::string out;
    const auto sentences = 3 + rng_.below(5);
    for (std::uint64_t i = 0; i < sentences; ++i) {
      if (i) out += ' ';
      out += rng_.uniform() < 0.12 ? dialogue() : sentence();
    }
    return out + "\n\n";
  }

 private:
  // Zipf-like choice: early entries are more frequent.
  template <typename T>
  const T& pick(const std::vector<T>& v) {
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) total += 1.0 / static_cast<double>(i + 2);
    double u = rng_.uniform() * total;
    for (std::size_t i = 0; i < v.size(); ++i) {
      u -= 1.0 / static_cast<double>(i + 2);
      if (u < 0.0) return v[i];
    }
    return v.back();
  }

  std::string noun_phrase() {
    if (rng_.uniform() < 0.25) return pick(kNames);
    std::string np = rng_.uniform() < 0.6 ? "the " : (rng_.uniform() < 0.5 ? "a " : "her ");
    if (rng_.uniform() < 0.45) np += std::string(pick(kAdjectives)) + ' ';
    np += pick(kNouns);
    if (np.rfind("a ", 0) == 0 && std::string("aeiou").find(np[2]) != std::string::npos)
      np.insert(1, "n");
    return np;
  }

  std::string clause(bool past) {
    std::string c = noun_phrase() + ' ';
    if (rng_.uniform() < 0.7) {
      const auto& v = pick(kVerbs);
      c += past ? v.second : v.first;
      c += ' ' + noun_phrase();
    } else {
      const auto& v = pick(kIntransitive);
      c += past ? v.second : v.first;
    }
    if (rng_.uniform() < 0.4) c += std::string(" ") + pick(kPrepositions) + ' ' + noun_phrase();
    if (rng_.uniform() < 0.25) c += std::string(" ") + pick(kAdverbs);
    return c;
  }

  std::string sentence() {
    const bool past = rng_.uniform() < 0.6;
    std::string s = clause(past);
    if (rng_.uniform() < 0.35) s += std::string(rng_.uniform() < 0.5 ? ", " : " ") + pick(kConnectives) + ' ' + clause(past);
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s + (rng_.uniform() < 0.1 ? "!" : ".");
  }

  std::string dialogue() {
    std::string inner = clause(false);
    inner[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(inner[0])));
    const bool question = rng_.uniform() < 0.3;
    return "\"" + inner + (question ? "?\" " : ",\" ") + pick(kNames) + ' ' +
           (question ? "asked" : pick(kSpeech)) + '.';
  }

  Rng rng_;
};

}  // namespace

std::string generate_synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  Grammar g(seed);
  std::string out;
  out.reserve(bytes + 1024);
  while (out.size() < bytes) out += g.paragraph();
  out.resize(bytes);
  return out;
}

}  // namespace sbn
