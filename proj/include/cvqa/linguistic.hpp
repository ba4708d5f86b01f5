#pragma once

// Question-side processing: tokenization, verb-centered role parsing
// (subject / action / object spans), and the shared text encoder that turns
// padded token sequences into d-dimensional position features.

#include "cvqa/nn.hpp"
#include "cvqa/types.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace cvqa::lang {

// Data tables defined in verb_lexicon.cpp.
const std::vector<std::string>& verb_base_lexicon();
const std::map<std::string, std::string>& irregular_past_map();
const std::set<std::string>& auxiliary_set();

inline const std::set<std::string>& verb_base_set() {
  static const std::set<std::string> s(verb_base_lexicon().begin(),
                                       verb_base_lexicon().end());
  return s;
}

// Recognizes base forms, listed irregular pasts, and -s/-ed/-ing inflections
// (with e-restoration and doubled-consonant stripping). Auxiliaries never
// count as verbs, so "did the car hit the pole" anchors on "hit".
inline bool is_verb_token(const std::string& token, std::string* base = nullptr) {
  const auto& aux = auxiliary_set();
  if (aux.count(token)) return false;
  const auto& bases = verb_base_set();
  auto accept = [&](const std::string& b) {
    if (base) *base = b;
    return true;
  };
  if (bases.count(token)) return accept(token);
  const auto& irr = irregular_past_map();
  if (auto it = irr.find(token); it != irr.end()) return accept(it->second);
  const size_t n = token.size();
  auto in_bases = [&](const std::string& s) { return bases.count(s) > 0; };
  if (n > 4 && token.ends_with("ing")) {
    const std::string stem = token.substr(0, n - 3);
    if (in_bases(stem)) return accept(stem);
    if (in_bases(stem + "e")) return accept(stem + "e");
    if (stem.size() >= 2 && stem[stem.size() - 1] == stem[stem.size() - 2] &&
        in_bases(stem.substr(0, stem.size() - 1)))
      return accept(stem.substr(0, stem.size() - 1));
  }
  if (n > 3 && token.ends_with("ed")) {
    const std::string stem = token.substr(0, n - 2);
    if (in_bases(stem)) return accept(stem);
    if (in_bases(token.substr(0, n - 1))) return accept(token.substr(0, n - 1));
    if (stem.size() >= 2 && stem[stem.size() - 1] == stem[stem.size() - 2] &&
        in_bases(stem.substr(0, stem.size() - 1)))
      return accept(stem.substr(0, stem.size() - 1));
  }
  if (n > 3 && token.ends_with("ies") && in_bases(token.substr(0, n - 3) + "y"))
    return accept(token.substr(0, n - 3) + "y");
  if (n > 3 && token.ends_with("es") && in_bases(token.substr(0, n - 2)))
    return accept(token.substr(0, n - 2));
  if (n > 2 && token.back() == 's' && in_bases(token.substr(0, n - 1)))
    return accept(token.substr(0, n - 1));
  return false;
}

// Lowercases and splits on anything that is not a letter or digit.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const unsigned char u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

struct RoleSpans {
  std::string subject;
  std::string action;
  std::string object;
  bool found_verb = false;
};

// Verb-centered shallow parse: the first non-auxiliary verb is the action,
// everything left of it the subject span, everything right the object span.
// Questions without a recognizable verb, or with an empty side span, fall
// back to the whole question for the affected roles.
inline RoleSpans parse_roles(const std::string& question) {
  const auto tokens = split_words(question);
  RoleSpans out;
  CVQA_REQUIRE(!tokens.empty(), ValidationError,
               "cannot parse an empty question");
  auto join = [](auto first, auto last) {
    std::string s;
    for (auto it = first; it != last; ++it) {
      if (!s.empty()) s.push_back(' ');
      s += *it;
    }
    return s;
  };
  const std::string whole = join(tokens.begin(), tokens.end());
  int verb_at = -1;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (is_verb_token(tokens[i])) {
      verb_at = static_cast<int>(i);
      break;
    }
  }
  if (verb_at < 0) {
    out.subject = out.action = out.object = whole;
    return out;
  }
  out.found_verb = true;
  out.action = tokens[static_cast<size_t>(verb_at)];
  out.subject = join(tokens.begin(), tokens.begin() + verb_at);
  out.object = join(tokens.begin() + verb_at + 1, tokens.end());
  if (out.subject.empty()) out.subject = whole;
  if (out.object.empty()) out.object = whole;
  return out;
}

struct QuestionBundle {
  std::string question;
  RoleSpans roles;
};

inline QuestionBundle bundle_question(const std::string& question) {
  return {question, parse_roles(question)};
}

// ---- vocabulary ----

class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  static Tokenizer build(const std::vector<std::string>& corpus) {
    Tokenizer t;
    t.id_to_word_ = {"<pad>", "<unk>"};
    t.word_to_id_ = {{"<pad>", kPad}, {"<unk>", kUnk}};
    for (const auto& text : corpus) {
      for (const auto& w : split_words(text)) {
        if (!t.word_to_id_.count(w)) {
          t.word_to_id_[w] = static_cast<int>(t.id_to_word_.size());
          t.id_to_word_.push_back(w);
        }
      }
    }
    return t;
  }

  std::vector<int> encode(const std::string& text) const {
    CVQA_REQUIRE(vocab_size() > 2, EncodingError,
                 "tokenizer has an empty vocabulary");
    std::vector<int> ids;
    for (const auto& w : split_words(text)) {
      auto it = word_to_id_.find(w);
      ids.push_back(it == word_to_id_.end() ? kUnk : it->second);
    }
    return ids;
  }

  int vocab_size() const { return static_cast<int>(id_to_word_.size()); }
  const std::vector<std::string>& words() const { return id_to_word_; }
  int id_of(const std::string& w) const {
    auto it = word_to_id_.find(w);
    return it == word_to_id_.end() ? kUnk : it->second;
  }

 private:
  std::map<std::string, int> word_to_id_;
  std::vector<std::string> id_to_word_;
};

// Pads / masks one already-encoded sequence to a fixed length.
struct PaddedSeq {
  std::vector<int> ids;  // length max_len, kPad-filled
  Vec keep;              // 1 for real tokens, 0 for padding
};

inline PaddedSeq pad_sequence(const std::vector<int>& ids, int max_len) {
  CVQA_REQUIRE(!ids.empty(), EncodingError, "cannot pad an empty sequence");
  CVQA_REQUIRE(static_cast<int>(ids.size()) <= max_len, EncodingError,
               "sequence of length " + std::to_string(ids.size()) +
                   " exceeds the padded length " + std::to_string(max_len));
  PaddedSeq out;
  out.ids.assign(static_cast<size_t>(max_len), Tokenizer::kPad);
  out.keep = Vec::Zero(max_len);
  for (size_t i = 0; i < ids.size(); ++i) {
    out.ids[i] = ids[i];
    out.keep(static_cast<Eigen::Index>(i)) = 1.0;
  }
  return out;
}

// ---- pretrained embedding loader (text format: word v1 .. v_dim) ----

inline Mat load_embeddings(const Tokenizer& tok, const std::string& path,
                           int dim) {
  std::ifstream is(path);
  CVQA_REQUIRE(is.good(), IoError, "cannot open embeddings: " + path);
  Mat table = Mat::Zero(tok.vocab_size(), dim);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    std::vector<double> vals;
    double v;
    while (ls >> v) vals.push_back(v);
    CVQA_REQUIRE(static_cast<int>(vals.size()) == dim, FormatError,
                 "embedding line " + std::to_string(line_no) + " has " +
                     std::to_string(vals.size()) + " values, expected " +
                     std::to_string(dim));
    const int id = tok.id_of(word);
    if (id != Tokenizer::kUnk)
      for (int c = 0; c < dim; ++c) table(id, c) = vals[static_cast<size_t>(c)];
  }
  return table;
}

// ---- encoder ----

template <class S>
struct TextEncoder {
  nn::Parameter<S>* embedding = nullptr;  // vocab x emb_dim
  nn::Linear<S> proj;                     // emb_dim -> d
  std::vector<nn::TransformerLayer<S>> layers;
  int vocab = 0;

  static TextEncoder create(nn::ParameterStore<S>& ps, const std::string& name,
                            int vocab, Eigen::Index emb_dim, Eigen::Index d,
                            int n_layers, int heads) {
    TextEncoder e;
    e.vocab = vocab;
    e.embedding = &ps.normal(name + ".embed", vocab, emb_dim, 0.1);
    e.proj = nn::Linear<S>::create(ps, name + ".proj", emb_dim, d);
    for (int l = 0; l < n_layers; ++l)
      e.layers.push_back(nn::TransformerLayer<S>::create(
          ps, name + ".l" + std::to_string(l), d, heads));
    return e;
  }

  nn::Var<S> operator()(nn::Tape<S>& tape, const PaddedSeq& seq,
                        const nn::DropoutCtx<S>& drop,
                        nn::ForwardTrace<S>* trace = nullptr,
                        const std::string& site = "") const {
    std::vector<int> ids = seq.ids;
    for (int id : ids)
      CVQA_REQUIRE(id >= 0 && id < vocab, EncodingError,
                   "token id " + std::to_string(id) +
                       " outside vocabulary of size " + std::to_string(vocab));
    VecX<S> keep = seq.keep.template cast<S>();
    nn::Var<S> x = ad::gather_rows(tape.param(*embedding), std::move(ids));
    x = proj(x);
    for (size_t l = 0; l < layers.size(); ++l)
      x = layers[l](x, x, &keep, drop, trace,
                    site + ".l" + std::to_string(l));
    return x;
  }
};

}  // namespace cvqa::lang
