#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "entrodrop/error.hpp"
#include "entrodrop/model.hpp"
#include "entrodrop/rng.hpp"

namespace entrodrop {

/// Order-k Markov source. Each context of the last `order` tokens has its own
/// sparse successor distribution (`branching` candidates with random weights),
/// derived from the seed. Order 0 is i.i.d. uniform over the vocabulary.
struct MarkovSource {
  std::size_t order = 1;
  std::size_t branching = 4;
  std::uint64_t seed = 0;
  friend bool operator==(const MarkovSource&, const MarkovSource&) = default;
};

/// A random pattern of length `period`, fixed by the seed, repeated from a
/// random phase in every sequence; each token is independently replaced by a
/// uniform draw with probability `noise`.
struct RepetitionSource {
  std::size_t period = 8;
  double noise = 0.05;
  std::uint64_t seed = 0;
  friend bool operator==(const RepetitionSource&, const RepetitionSource&) = default;
};

using CorpusGenerator = std::variant<MarkovSource, RepetitionSource>;

struct SyntheticCorpus {
  std::size_t vocab = 0;
  std::vector<std::vector<Token>> sequences;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }
  friend bool operator==(const SyntheticCorpus&, const SyntheticCorpus&) = default;
};

namespace detail {

inline Token draw_markov(const MarkovSource& src, std::size_t vocab, std::span<const Token> context, Rng& rng) {
  if (src.order == 0 || context.size() < src.order) return static_cast<Token>(rng.below(vocab));
  std::uint64_t h = src.seed ^ 0x6A09E667F3BCC909ull;
  for (Token t : context.last(src.order)) {
    h ^= t + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
    splitmix64(h);
  }
  Rng table(h);
  const std::size_t branches = std::max<std::size_t>(1, src.branching);
  std::vector<Token> successors(branches);
  std::vector<double> weights(branches);
  double total = 0.0;
  for (std::size_t b = 0; b < branches; ++b) {
    successors[b] = static_cast<Token>(table.below(vocab));
    weights[b] = 0.05 + table.uniform();
    total += weights[b];
  }
  double u = rng.uniform() * total;
  for (std::size_t b = 0; b < branches; ++b) {
    if ((u -= weights[b]) < 0.0) return successors[b];
  }
  return successors.back();
}

}  // namespace detail

inline SyntheticCorpus make_corpus(const CorpusGenerator& generator, std::size_t vocab, std::size_t sequences,
                                   std::size_t seq_len) {
  require(vocab >= 1 && sequences >= 1 && seq_len >= 2, "corpus needs vocab >= 1, sequences >= 1, seq_len >= 2");
  SyntheticCorpus corpus{vocab, {}};
  std::visit(
      [&](const auto& src) {
        using S = std::decay_t<decltype(src)>;
        const Rng root(src.seed);
        for (std::size_t s = 0; s < sequences; ++s) {
          Rng rng = root.fork(s);
          std::vector<Token> seq;
          seq.reserve(seq_len);
          if constexpr (std::is_same_v<S, MarkovSource>) {
            for (std::size_t t = 0; t < seq_len; ++t) seq.push_back(detail::draw_markov(src, vocab, seq, rng));
          } else {
            require(src.period >= 1, "repetition period must be >= 1");
            require(src.noise >= 0.0 && src.noise <= 1.0, "repetition noise must be in [0, 1]");
            Rng pattern_rng = root.fork(~std::uint64_t{0});
            std::vector<Token> pattern(src.period);
            for (auto& t : pattern) t = static_cast<Token>(pattern_rng.below(vocab));
            const std::size_t phase = rng.below(src.period);
            for (std::size_t t = 0; t < seq_len; ++t) {
              Token tok = pattern[(t + phase) % src.period];
              if (rng.uniform() < src.noise) tok = static_cast<Token>(rng.below(vocab));
              seq.push_back(tok);
            }
          }
          corpus.sequences.push_back(std::move(seq));
        }
      },
      generator);
  return corpus;
}

/// One sequence per line, token ids separated by single spaces.
inline void write_corpus(const SyntheticCorpus& corpus, std::ostream& out) {
  for (const auto& seq : corpus.sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
    out << '\n';
  }
}

inline SyntheticCorpus read_corpus(std::istream& in, std::size_t vocab) {
  SyntheticCorpus corpus{vocab, {}};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::vector<Token> seq;
    long long id;
    while (fields >> id) {
      if (id < 0 || static_cast<unsigned long long>(id) >= vocab)
        throw InputError("corpus line " + std::to_string(line_no) + ": token " + std::to_string(id) +
                         " outside vocabulary of " + std::to_string(vocab));
      seq.push_back(static_cast<Token>(id));
    }
    if (!fields.eof()) throw InputError("corpus line " + std::to_string(line_no) + ": not an integer token id");
    if (!seq.empty()) corpus.sequences.push_back(std::move(seq));
  }
  return corpus;
}

inline SyntheticCorpus load_corpus(const std::string& path, std::size_t vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file '" + path + "'", 0);
  return read_corpus(in, vocab);
}

}  // namespace entrodrop
