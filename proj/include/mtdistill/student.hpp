#pragma once

// Student models. `Student` is the contract the trainer and evaluator rely on; `TinySeq2Seq`
// is a small CPU sequence-to-sequence generator with analytic gradients, enough to exercise
// the whole pipeline end to end.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtdistill/errors.hpp"
#include "mtdistill/util.hpp"

namespace mtdistill {

/// Token ids for one (input, target) pair. `target` ends with the end-of-sequence id.
struct EncodedExample {
  std::vector<int> input;
  std::vector<int> target;
};

/// A trainable text generator.
class Student {
 public:
  virtual ~Student() = default;

  /// Tokenizes and truncates per the model's input policy. Throws DataError when the target
  /// has no tokens.
  virtual EncodedExample encode(std::string_view input, std::string_view target) const = 0;
  virtual int pad_id() const = 0;

  /// log p(target[t] | input, target[<t]) for every target position (teacher-supervised).
  virtual std::vector<double> target_log_probs(const EncodedExample& ex) const = 0;

  /// Adds the gradient of `scale * mean_t(-log p_t)` over non-pad positions to `grad` and
  /// returns the unscaled mean.
  virtual double accumulate_loss_gradient(const EncodedExample& ex, double scale, std::span<double> grad) const = 0;

  virtual std::string greedy_decode(std::string_view input) const = 0;

  virtual std::span<double> parameters() = 0;
  virtual std::span<const double> parameters() const = 0;

  virtual json serialize() const = 0;
};

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Whitespace-word vocabulary with fixed special ids.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;

  Vocabulary() : tokens_{"<pad>", "<unk>", "<bos>", "<eos>"} { reindex(); }

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 4 || tokens_[0] != "<pad>" || tokens_[1] != "<unk>" || tokens_[2] != "<bos>" ||
        tokens_[3] != "<eos>")
      throw ParseError("vocabulary must start with <pad> <unk> <bos> <eos>");
    reindex();
  }

  /// Specials followed by every distinct word of `texts`, sorted.
  static Vocabulary build(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const auto& t : texts)
      for (auto& w : util::split_ws(t)) words.insert(std::move(w));
    Vocabulary v;
    for (const auto& w : words)
      if (!v.index_.contains(w)) v.tokens_.push_back(w);
    v.reindex();
    return v;
  }

  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }

  std::vector<int> ids(const std::vector<std::string>& words) const {
    std::vector<int> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  std::string detokenize(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    for (int i : ids)
      if (i >= 4 && i < size()) words.push_back(tokens_[i]);
    return util::join(words, " ");
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Input overflow policy: keep the prefix (everything through the first "question:" marker)
/// and the options (from the last "options:" marker), dropping question words from the left.
/// If prefix and options alone still overflow, the options are cut from the right.
inline std::vector<std::string> truncate_student_tokens(std::vector<std::string> tokens, std::size_t max_len) {
  if (tokens.size() <= max_len) return tokens;
  std::size_t head_end = 1;
  auto q = std::find(tokens.begin(), tokens.end(), "question:");
  if (q != tokens.end()) head_end = static_cast<std::size_t>(q - tokens.begin()) + 1;
  std::size_t tail_begin = tokens.size();
  for (std::size_t i = tokens.size(); i-- > head_end;)
    if (tokens[i] == "options:") {
      tail_begin = i;
      break;
    }
  std::size_t excess = tokens.size() - max_len;
  std::size_t drop = std::min(excess, tail_begin - head_end);
  tokens.erase(tokens.begin() + static_cast<std::ptrdiff_t>(head_end),
               tokens.begin() + static_cast<std::ptrdiff_t>(head_end + drop));
  if (tokens.size() > max_len) tokens.resize(max_len);
  return tokens;
}

// ---------------------------------------------------------------------------
// TinySeq2Seq
// ---------------------------------------------------------------------------

/// Encoder: mean of input-word embeddings concatenated with the first word's embedding (the
/// task prefix). Decoder step t:
///   h_t = tanh(W_c c + W_p E_out[y_{t-1}] + P[t] + b_h),  logits_t = W_o h_t + b_o.
class TinySeq2Seq final : public Student {
 public:
  struct Dims {
    int embed = 32;
    int hidden = 64;
    int max_target = 48;  // target words; one more position holds end-of-sequence
    double init_scale = 0.1;
  };

  TinySeq2Seq(Vocabulary vocab, Dims dims, std::uint64_t seed, std::size_t max_input_length = 1024)
      : vocab_(std::move(vocab)), dims_(dims), max_input_length_(max_input_length) {
    if (dims_.embed < 1 || dims_.hidden < 1 || dims_.max_target < 1) throw ConfigError("student dims must be positive");
    layout();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, dims_.init_scale);
    for (std::size_t i = 0; i < off_b_h_; ++i) theta_[i] = normal(rng);
    for (std::size_t i = off_W_o_; i < off_b_o_; ++i) theta_[i] = normal(rng);
  }

  static std::unique_ptr<TinySeq2Seq> deserialize(const json& j) {
    if (j.value("type", std::string{}) != "tiny-seq2seq") throw ParseError("not a tiny-seq2seq checkpoint");
    Dims d;
    d.embed = j.at("dims").at("embed").get<int>();
    d.hidden = j.at("dims").at("hidden").get<int>();
    d.max_target = j.at("dims").at("max_target").get<int>();
    d.init_scale = j.at("dims").at("init_scale").get<double>();
    auto m = std::make_unique<TinySeq2Seq>(Vocabulary(j.at("vocab").get<std::vector<std::string>>()), d, 0,
                                           j.at("max_input_length").get<std::size_t>());
    auto params = j.at("parameters").get<std::vector<double>>();
    if (params.size() != m->theta_.size()) throw ParseError("checkpoint parameter count mismatch");
    m->theta_ = std::move(params);
    return m;
  }

  json serialize() const override {
    return json{{"type", "tiny-seq2seq"},
                {"vocab", vocab_.tokens()},
                {"dims",
                 {{"embed", dims_.embed},
                  {"hidden", dims_.hidden},
                  {"max_target", dims_.max_target},
                  {"init_scale", dims_.init_scale}}},
                {"max_input_length", max_input_length_},
                {"parameters", theta_}};
  }

  const Vocabulary& vocabulary() const noexcept { return vocab_; }
  const Dims& dims() const noexcept { return dims_; }
  std::size_t max_input_length() const noexcept { return max_input_length_; }

  EncodedExample encode(std::string_view input, std::string_view target) const override {
    EncodedExample ex;
    ex.input = encode_input(input);
    auto words = util::split_ws(target);
    if (words.empty()) throw DataError("target is empty after tokenization");
    if (words.size() > static_cast<std::size_t>(dims_.max_target)) words.resize(dims_.max_target);
    ex.target = vocab_.ids(words);
    ex.target.push_back(Vocabulary::kEos);
    return ex;
  }

  int pad_id() const override { return Vocabulary::kPad; }

  std::vector<double> target_log_probs(const EncodedExample& ex) const override {
    auto u = context_projection(ex.input);
    std::vector<double> out;
    out.reserve(ex.target.size());
    std::vector<double> h(H()), z(V());
    int prev = Vocabulary::kBos;
    for (std::size_t t = 0; t < ex.target.size(); ++t) {
      step(u, prev, t, h, z);
      out.push_back(z[ex.target[t]] - log_sum_exp(z));
      prev = ex.target[t];
    }
    return out;
  }

  double accumulate_loss_gradient(const EncodedExample& ex, double scale, std::span<double> grad) const override {
    if (grad.size() != theta_.size()) throw DomainError("gradient buffer size mismatch");
    const int Hd = H(), Vs = V(), d = D();
    Context ctx = context(ex.input);
    std::vector<double> u = project(ctx.c);

    std::size_t n_tokens = 0;
    for (int y : ex.target) n_tokens += y != pad_id();
    if (n_tokens == 0) throw DataError("target has no non-pad positions");
    const double per_token = scale / static_cast<double>(n_tokens);

    std::vector<double> du(Hd, 0.0), h(Hd), z(Vs), dz(Vs), dh(Hd), da(Hd);
    double loss = 0.0;
    int prev = Vocabulary::kBos;
    for (std::size_t t = 0; t < ex.target.size(); ++t) {
      const int y = ex.target[t];
      step(u, prev, t, h, z);
      if (y != pad_id()) {
        double lse = log_sum_exp(z);
        loss += lse - z[y];
        for (int v = 0; v < Vs; ++v) dz[v] = std::exp(z[v] - lse) * per_token;
        dz[y] -= per_token;

        double* gWo = &grad[off_W_o_];
        double* gbo = &grad[off_b_o_];
        const double* Wo = &theta_[off_W_o_];
        std::fill(dh.begin(), dh.end(), 0.0);
        for (int v = 0; v < Vs; ++v) {
          const double g = dz[v];
          gbo[v] += g;
          double* row = gWo + static_cast<std::size_t>(v) * Hd;
          const double* wrow = Wo + static_cast<std::size_t>(v) * Hd;
          for (int k = 0; k < Hd; ++k) {
            row[k] += g * h[k];
            dh[k] += g * wrow[k];
          }
        }
        for (int k = 0; k < Hd; ++k) da[k] = dh[k] * (1.0 - h[k] * h[k]);

        double* gP = &grad[off_P_ + t * Hd];
        double* gbh = &grad[off_b_h_];
        double* gWp = &grad[off_W_p_];
        double* gEout = &grad[off_E_out_ + static_cast<std::size_t>(prev) * d];
        const double* Wp = &theta_[off_W_p_];
        const double* eprev = &theta_[off_E_out_ + static_cast<std::size_t>(prev) * d];
        for (int k = 0; k < Hd; ++k) {
          const double g = da[k];
          gP[k] += g;
          gbh[k] += g;
          du[k] += g;
          double* wrow = gWp + static_cast<std::size_t>(k) * d;
          const double* prow = Wp + static_cast<std::size_t>(k) * d;
          for (int e = 0; e < d; ++e) {
            wrow[e] += g * eprev[e];
            gEout[e] += g * prow[e];
          }
        }
      }
      prev = y;
    }

    // Back through the context projection and the encoder pooling.
    std::vector<double> dc(2 * d, 0.0);
    double* gWc = &grad[off_W_c_];
    const double* Wc = &theta_[off_W_c_];
    for (int k = 0; k < Hd; ++k) {
      double* row = gWc + static_cast<std::size_t>(k) * 2 * d;
      const double* wrow = Wc + static_cast<std::size_t>(k) * 2 * d;
      for (int e = 0; e < 2 * d; ++e) {
        row[e] += du[k] * ctx.c[e];
        dc[e] += du[k] * wrow[e];
      }
    }
    if (!ex.input.empty()) {
      const double inv_n = 1.0 / static_cast<double>(ex.input.size());
      for (int x : ex.input) {
        double* g = &grad[off_E_in_ + static_cast<std::size_t>(x) * d];
        for (int e = 0; e < d; ++e) g[e] += dc[e] * inv_n;
      }
      double* g0 = &grad[off_E_in_ + static_cast<std::size_t>(ex.input.front()) * d];
      for (int e = 0; e < d; ++e) g0[e] += dc[d + e];
    }
    return loss / static_cast<double>(n_tokens);
  }

  std::string greedy_decode(std::string_view input) const override {
    auto u = context_projection(encode_input(input));
    std::vector<double> h(H()), z(V());
    std::vector<int> out;
    int prev = Vocabulary::kBos;
    for (int t = 0; t <= dims_.max_target; ++t) {
      step(u, prev, static_cast<std::size_t>(t), h, z);
      int best = static_cast<int>(std::max_element(z.begin() + 1, z.end()) - z.begin());  // never <pad>
      if (best == Vocabulary::kEos) break;
      out.push_back(best);
      prev = best;
    }
    return vocab_.detokenize(out);
  }

  std::span<double> parameters() override { return theta_; }
  std::span<const double> parameters() const override { return theta_; }

  std::vector<int> encode_input(std::string_view input) const {
    return vocab_.ids(truncate_student_tokens(util::split_ws(input), max_input_length_));
  }

 private:
  struct Context {
    std::vector<double> c;  // [mean embedding ; first-token embedding]
  };

  int V() const noexcept { return vocab_.size(); }
  int D() const noexcept { return dims_.embed; }
  int H() const noexcept { return dims_.hidden; }
  std::size_t positions() const noexcept { return static_cast<std::size_t>(dims_.max_target) + 1; }

  void layout() {
    const std::size_t V_ = V(), d = D(), Hd = H();
    off_E_in_ = 0;
    off_E_out_ = off_E_in_ + V_ * d;
    off_W_c_ = off_E_out_ + V_ * d;
    off_W_p_ = off_W_c_ + Hd * 2 * d;
    off_P_ = off_W_p_ + Hd * d;
    off_b_h_ = off_P_ + positions() * Hd;
    off_W_o_ = off_b_h_ + Hd;
    off_b_o_ = off_W_o_ + V_ * Hd;
    theta_.assign(off_b_o_ + V_, 0.0);
  }

  Context context(const std::vector<int>& input) const {
    const int d = D();
    Context ctx{std::vector<double>(2 * d, 0.0)};
    if (input.empty()) return ctx;
    const double inv_n = 1.0 / static_cast<double>(input.size());
    for (int x : input) {
      const double* e = &theta_[off_E_in_ + static_cast<std::size_t>(x) * d];
      for (int k = 0; k < d; ++k) ctx.c[k] += e[k] * inv_n;
    }
    const double* e0 = &theta_[off_E_in_ + static_cast<std::size_t>(input.front()) * d];
    for (int k = 0; k < d; ++k) ctx.c[d + k] = e0[k];
    return ctx;
  }

  std::vector<double> project(const std::vector<double>& c) const {
    const int Hd = H(), d2 = 2 * D();
    std::vector<double> u(Hd);
    for (int k = 0; k < Hd; ++k) {
      const double* row = &theta_[off_W_c_ + static_cast<std::size_t>(k) * d2];
      double s = theta_[off_b_h_ + k];
      for (int e = 0; e < d2; ++e) s += row[e] * c[e];
      u[k] = s;
    }
    return u;
  }

  std::vector<double> context_projection(const std::vector<int>& input) const { return project(context(input).c); }

  /// Fills hidden state and logits for position t given the previous token.
  void step(const std::vector<double>& u, int prev, std::size_t t, std::vector<double>& h, std::vector<double>& z) const {
    const int Hd = H(), d = D(), Vs = V();
    const std::size_t pos = std::min(t, positions() - 1);
    const double* eprev = &theta_[off_E_out_ + static_cast<std::size_t>(prev) * d];
    const double* P = &theta_[off_P_ + pos * Hd];
    for (int k = 0; k < Hd; ++k) {
      const double* row = &theta_[off_W_p_ + static_cast<std::size_t>(k) * d];
      double s = u[k] + P[k];
      for (int e = 0; e < d; ++e) s += row[e] * eprev[e];
      h[k] = std::tanh(s);
    }
    for (int v = 0; v < Vs; ++v) {
      const double* row = &theta_[off_W_o_ + static_cast<std::size_t>(v) * Hd];
      double s = theta_[off_b_o_ + v];
      for (int k = 0; k < Hd; ++k) s += row[k] * h[k];
      z[v] = s;
    }
  }

  static double log_sum_exp(const std::vector<double>& z) {
    double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s);
  }

  Vocabulary vocab_;
  Dims dims_;
  std::size_t max_input_length_;
  std::vector<double> theta_;
  std::size_t off_E_in_ = 0, off_E_out_ = 0, off_W_c_ = 0, off_W_p_ = 0, off_P_ = 0, off_b_h_ = 0, off_W_o_ = 0,
              off_b_o_ = 0;
};

}  // namespace mtdistill
