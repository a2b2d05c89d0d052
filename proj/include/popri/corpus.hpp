#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "popri/errors.hpp"

namespace popri {

inline constexpr int kDefaultMaxLen = 16;

// Token ids live in [0, size). The last id (size - 1) is the reserved
// end-of-sequence token; it terminates generation and never contributes to
// embeddings.
struct Vocabulary {
  int size = 0;

  explicit Vocabulary(int v) : size(v) {
    if (v < 3) throw ConfigError("vocabulary size must be >= 3, got " + std::to_string(v));
  }
  Vocabulary() = default;

  int eos() const { return size - 1; }
  int content_tokens() const { return size - 1; }
  bool valid_token(int t) const { return t >= 0 && t < size; }
};

// A single text sample: a non-empty list of token ids.
struct TokenSequence {
  std::vector<int> tokens;

  TokenSequence() = default;
  explicit TokenSequence(std::vector<int> toks) : tokens(std::move(toks)) {
    if (tokens.empty()) throw ConfigError("empty token sequence");
    for (int t : tokens) {
      if (t < 0) throw InvalidTokenError("negative token id " + std::to_string(t));
    }
  }

  int length() const { return static_cast<int>(tokens.size()); }
  bool operator==(const TokenSequence& o) const { return tokens == o.tokens; }
};

struct ClientDataset {
  int client_id = 0;
  std::optional<int> label;  // class id for conditional runs
  std::vector<TokenSequence> samples;

  int sample_count() const { return static_cast<int>(samples.size()); }
};

struct EmbeddingVector {
  std::vector<double> coords;

  int dim() const { return static_cast<int>(coords.size()); }
};

inline double dot(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.dim() != b.dim())
    throw DimensionMismatchError("embedding dims " + std::to_string(a.dim()) + " vs " +
                                 std::to_string(b.dim()));
  double s = 0.0;
  for (int i = 0; i < a.dim(); ++i) s += a.coords[i] * b.coords[i];
  return s;
}

inline double l2_norm(const EmbeddingVector& v) {
  double s = 0.0;
  for (double x : v.coords) s += x * x;
  return std::sqrt(s);
}

// Bag-of-tokens embedding: count each content token, L2-normalize. The EOS
// coordinate is excluded so sequence length cannot leak in as a constant
// direction. Output is unit-norm for every sequence with at least one
// content token.
inline EmbeddingVector embed(const TokenSequence& seq, const Vocabulary& vocab) {
  EmbeddingVector e;
  e.coords.assign(static_cast<std::size_t>(vocab.content_tokens()), 0.0);
  for (int t : seq.tokens) {
    if (!vocab.valid_token(t))
      throw InvalidTokenError("token " + std::to_string(t) + " >= vocab size " +
                              std::to_string(vocab.size));
    if (t != vocab.eos()) e.coords[static_cast<std::size_t>(t)] += 1.0;
  }
  const double n = l2_norm(e);
  if (n == 0.0) throw DegenerateEmbeddingError("sequence has no content tokens");
  for (double& x : e.coords) x /= n;
  return e;
}

// Cosine similarity. Bag-of-tokens coordinates are non-negative, so on embed
// outputs the value lies in [0, 1].
inline double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw DegenerateEmbeddingError("cosine of zero vector");
  return dot(a, b) / (na * nb);
}

// A federation of client datasets together with the vocabulary they are
// tokenized against.
struct Corpus {
  Vocabulary vocab;
  std::vector<ClientDataset> clients;

  int total_samples() const {
    int n = 0;
    for (const auto& c : clients) n += c.sample_count();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Corpus file format
//
//   vocab=<V>
//   client <id> [label=<b>]
//   <space-separated token ids, one sample per line>
//   <blank line ends the block>
// ---------------------------------------------------------------------------

inline Corpus load_corpus(std::istream& in, const std::string& origin = "<stream>") {
  std::string line;
  long lineno = 0;

  if (!std::getline(in, line)) throw ParseError("empty corpus file: " + origin, 0);
  ++lineno;
  if (line.rfind("vocab=", 0) != 0) throw ParseError("expected 'vocab=<V>' header", lineno);
  int vsize = 0;
  try {
    vsize = std::stoi(line.substr(6));
  } catch (const std::exception&) {
    throw ParseError("bad vocabulary size '" + line.substr(6) + "'", lineno);
  }

  Corpus corpus;
  corpus.vocab = Vocabulary(vsize);

  ClientDataset current;
  bool in_block = false;
  auto flush = [&]() {
    if (!in_block) return;
    if (current.samples.empty())
      throw ParseError("client " + std::to_string(current.client_id) + " has no samples", lineno);
    corpus.clients.push_back(std::move(current));
    current = ClientDataset{};
    in_block = false;
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      flush();
      continue;
    }
    if (line.rfind("client", 0) == 0) {
      flush();
      std::istringstream ss(line);
      std::string kw;
      ss >> kw;
      if (!(ss >> current.client_id)) throw ParseError("bad client header '" + line + "'", lineno);
      std::string extra;
      if (ss >> extra) {
        if (extra.rfind("label=", 0) == 0) {
          try {
            current.label = std::stoi(extra.substr(6));
          } catch (const std::exception&) {
            throw ParseError("bad label '" + extra + "'", lineno);
          }
        } else {
          throw ParseError("unexpected token '" + extra + "' in client header", lineno);
        }
      }
      in_block = true;
      continue;
    }
    if (!in_block) throw ParseError("sample line outside client block", lineno);
    std::istringstream ss(line);
    std::vector<int> toks;
    long long v;
    while (ss >> v) {
      if (v < 0 || v >= vsize)
        throw InvalidTokenError("token " + std::to_string(v) + " out of range [0, " +
                                std::to_string(vsize) + ") at line " + std::to_string(lineno));
      toks.push_back(static_cast<int>(v));
    }
    if (!ss.eof()) throw ParseError("non-numeric sample data", lineno);
    if (toks.empty()) throw ParseError("empty sample line", lineno);
    current.samples.emplace_back(std::move(toks));
  }
  flush();

  if (corpus.clients.empty()) throw ParseError("corpus has no clients: " + origin, lineno);

  // Duplicate ids would break per-client noise stream derivation.
  std::vector<int> ids;
  for (const auto& c : corpus.clients) ids.push_back(c.client_id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw ParseError("duplicate client id in corpus: " + origin, lineno);

  return corpus;
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file: " + path);
  return load_corpus(in, path);
}

inline void save_corpus(const Corpus& corpus, std::ostream& out) {
  out << "vocab=" << corpus.vocab.size << "\n";
  for (const auto& c : corpus.clients) {
    out << "client " << c.client_id;
    if (c.label) out << " label=" << *c.label;
    out << "\n";
    for (const auto& s : c.samples) {
      for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        if (i) out << ' ';
        out << s.tokens[i];
      }
      out << "\n";
    }
    out << "\n";
  }
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write corpus file: " + path);
  save_corpus(corpus, out);
}

}  // namespace popri
