#pragma once

// Surrogate accuracy predictors: token encoding, MLP and LSTM regressors
// trained with L1 loss and Adam, and 5-member ensembles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "pnas/cell_space.hpp"
#include "pnas/error.hpp"
#include "pnas/rng.hpp"

namespace pnas {

/// Input-token vocabulary: ids 0..kMaxBlocks, enough for any position.
inline constexpr int kInputVocab = kMaxBlocks + 1;

struct TokenSequence {
  std::vector<int> tokens;  ///< I1, I2, O1, O2 per block
  int num_blocks() const { return static_cast<int>(tokens.size() / 4); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline TokenSequence encode_tokens(const CellSpec& cell) {
  if (cell.num_blocks() > kMaxBlocks) {
    throw ValidationError("cell with " + std::to_string(cell.num_blocks()) + " blocks exceeds the vocabulary");
  }
  TokenSequence seq;
  seq.tokens.reserve(static_cast<std::size_t>(4 * cell.num_blocks()));
  for (const auto& b : cell.blocks()) {
    seq.tokens.push_back(b.i1.value);
    seq.tokens.push_back(b.i2.value);
    seq.tokens.push_back(op_id(b.o1));
    seq.tokens.push_back(op_id(b.o2));
  }
  return seq;
}

enum class PredictorKind { mlp, rnn };

inline std::string_view predictor_kind_name(PredictorKind k) { return k == PredictorKind::mlp ? "mlp" : "rnn"; }

inline PredictorKind parse_predictor_kind(std::string_view s) {
  if (s == "mlp") return PredictorKind::mlp;
  if (s == "rnn") return PredictorKind::rnn;
  throw ConfigError("unknown predictor kind '" + std::string(s) + "'");
}

struct PredictorConfig {
  PredictorKind kind = PredictorKind::mlp;
  int embed_dim = 100;
  int hidden = 100;
  int mlp_layers = 2;
  double embed_init = 0.1;
  /// sigmoid(1.8) ~= 0.86, the mean proxy accuracy of 1-block cells.
  double final_bias_init = 1.8;
  double output_init = 0.01;
  double forget_bias_init = 1.0;
  double lr_first_level = 0.01;
  double lr_later_levels = 0.002;
  /// Full-batch Adam steps.
  int epochs_first_level = 200;
  int epochs_later_levels = 100;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;

  double learning_rate(int level) const { return level <= 1 ? lr_first_level : lr_later_levels; }
  int epochs(int level) const { return level <= 1 ? epochs_first_level : epochs_later_levels; }

  void validate() const {
    if (embed_dim < 1 || hidden < 1 || mlp_layers < 1) throw ConfigError("predictor dimensions must be positive");
    if (epochs_first_level < 0 || epochs_later_levels < 0) throw ConfigError("predictor epochs must be >= 0");
    if (!(lr_first_level > 0) || !(lr_later_levels > 0)) throw ConfigError("predictor learning rates must be > 0");
  }
};

struct TrainingExample {
  CellSpec cell;
  double accuracy = 0.0;
};

struct ParamGroup {
  std::string name;
  Eigen::MatrixXd value;
};

struct FitReport {
  std::vector<double> losses;  ///< training MAE before each step
  double final_loss = 0.0;
};

struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::map<std::string, double> per_group;
  std::size_t coordinates_checked = 0;
  bool excluded = false;  ///< prediction sits exactly on the label (L1 kink)
};

namespace detail {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline void validate_examples(const std::vector<TrainingExample>& data) {
  if (data.empty()) throw ValidationError("training data is empty");
  for (const auto& ex : data) {
    if (!(ex.accuracy >= 0.0 && ex.accuracy <= 1.0)) {
      throw ValidationError("accuracy " + std::to_string(ex.accuracy) + " for cell '" + cell_key(ex.cell) +
                            "' outside [0, 1]");
    }
    if (ex.cell.num_blocks() < 1 || ex.cell.num_blocks() > kMaxBlocks) {
      throw ValidationError("cell '" + cell_key(ex.cell) + "' outside the predictor vocabulary");
    }
  }
}

inline void fill_uniform(Eigen::MatrixXd& m, double limit, Rng& rng) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-limit, limit);
  }
}

inline double glorot_limit(Eigen::Index fan_in, Eigen::Index fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

}  // namespace detail

/// One MLP or LSTM regressor. Parameters are stored as named groups so that
/// Adam, checkpoints and gradient checks treat both bodies uniformly.
///
/// MLP: each block becomes [e(I1); e(I2); e(O1); e(O2)] (4D), the block
/// vectors are averaged, then `mlp_layers` tanh layers, a linear output and
/// a sigmoid.
/// LSTM: the 4b tokens are embedded and read in order; the final hidden
/// state goes through a linear output and a sigmoid. Gate order i, f, o, g.
class Predictor {
 public:
  Predictor() = default;

  explicit Predictor(PredictorConfig config) : config_(std::move(config)) {
    config_.validate();
    initialize();
  }

  const PredictorConfig& config() const { return config_; }
  PredictorKind kind() const { return config_.kind; }
  const std::vector<ParamGroup>& params() const { return params_; }
  std::vector<ParamGroup>& mutable_params() { return params_; }

  /// Re-draws every parameter from config().seed.
  void initialize() {
    Rng rng(derive_seed(config_.seed, "predictor-init"));
    const int D = config_.embed_dim;
    const int H = config_.hidden;
    params_.clear();
    auto add = [&](std::string name, Eigen::Index rows, Eigen::Index cols) -> Eigen::MatrixXd& {
      params_.push_back(ParamGroup{std::move(name), Eigen::MatrixXd::Zero(rows, cols)});
      return params_.back().value;
    };
    detail::fill_uniform(add("input_embedding", D, kInputVocab), config_.embed_init, rng);
    detail::fill_uniform(add("op_embedding", D, kNumOperators), config_.embed_init, rng);
    if (config_.kind == PredictorKind::mlp) {
      Eigen::Index fan_in = 4 * D;
      for (int l = 0; l < config_.mlp_layers; ++l) {
        auto& w = add("w" + std::to_string(l + 1), H, fan_in);
        detail::fill_uniform(w, detail::glorot_limit(fan_in, H), rng);
        add("b" + std::to_string(l + 1), H, 1);
        fan_in = H;
      }
    } else {
      auto& wx = add("lstm_wx", 4 * H, D);
      detail::fill_uniform(wx, detail::glorot_limit(D, 4 * H), rng);
      auto& wh = add("lstm_wh", 4 * H, H);
      detail::fill_uniform(wh, detail::glorot_limit(H, 4 * H), rng);
      auto& b = add("lstm_b", 4 * H, 1);
      b.block(H, 0, H, 1).setConstant(config_.forget_bias_init);
    }
    detail::fill_uniform(add("w_out", 1, H), config_.output_init, rng);
    add("b_out", 1, 1)(0, 0) = config_.final_bias_init;
  }

  /// Predicted accuracies in (0, 1).
  std::vector<double> predict(const std::vector<CellSpec>& cells) const {
    std::vector<TokenSequence> seqs;
    seqs.reserve(cells.size());
    for (const auto& c : cells) {
      if (c.num_blocks() < 1 || c.num_blocks() > kMaxBlocks) {
        throw ValidationError("cannot predict cell '" + cell_key(c) + "': size outside [1, " +
                              std::to_string(kMaxBlocks) + "]");
      }
      seqs.push_back(encode_tokens(c));
    }
    return predict_tokens(seqs);
  }

  double predict(const CellSpec& cell) const { return predict(std::vector<CellSpec>{cell}).front(); }

  std::vector<double> predict_tokens(const std::vector<TokenSequence>& seqs) const {
    std::vector<double> logits = config_.kind == PredictorKind::mlp ? mlp_logits_fast(seqs) : lstm_logits_fast(seqs);
    for (double& z : logits) z = detail::sigmoid(z);
    return logits;
  }

  /// Mean absolute error on `data`; fills `grads` (same layout as params())
  /// when non-null. The L1 subgradient at zero residual is 0.
  double loss(const std::vector<TokenSequence>& seqs, const std::vector<double>& targets,
              std::vector<Eigen::MatrixXd>* grads) const {
    if (grads) {
      grads->resize(params_.size());
      for (std::size_t g = 0; g < params_.size(); ++g) {
        (*grads)[g].setZero(params_[g].value.rows(), params_[g].value.cols());
      }
    }
    return config_.kind == PredictorKind::mlp ? mlp_loss(seqs, targets, grads) : lstm_loss(seqs, targets, grads);
  }

  /// Full-batch Adam on the L1 loss. Learning rate and step count follow
  /// `level` (first level vs later levels). Continues from current weights.
  FitReport fit(const std::vector<TrainingExample>& data, int level) {
    detail::validate_examples(data);
    std::vector<TokenSequence> seqs;
    std::vector<double> targets;
    for (const auto& ex : data) {
      seqs.push_back(encode_tokens(ex.cell));
      targets.push_back(ex.accuracy);
    }
    return fit_tokens(seqs, targets, config_.epochs(level), config_.learning_rate(level));
  }

  FitReport fit_tokens(const std::vector<TokenSequence>& seqs, const std::vector<double>& targets, int steps,
                       double lr) {
    FitReport report;
    std::vector<Eigen::MatrixXd> grads;
    std::vector<Eigen::MatrixXd> m(params_.size());
    std::vector<Eigen::MatrixXd> v(params_.size());
    for (std::size_t g = 0; g < params_.size(); ++g) {
      m[g].setZero(params_[g].value.rows(), params_[g].value.cols());
      v[g].setZero(params_[g].value.rows(), params_[g].value.cols());
    }
    const double b1 = config_.adam_beta1;
    const double b2 = config_.adam_beta2;
    double b1t = 1.0;
    double b2t = 1.0;
    for (int step = 0; step < steps; ++step) {
      report.losses.push_back(loss(seqs, targets, &grads));
      b1t *= b1;
      b2t *= b2;
      const double step_size = lr * std::sqrt(1.0 - b2t) / (1.0 - b1t);
      for (std::size_t g = 0; g < params_.size(); ++g) {
        m[g] = b1 * m[g] + (1.0 - b1) * grads[g];
        v[g] = b2 * v[g] + (1.0 - b2) * grads[g].cwiseAbs2();
        params_[g].value.array() -=
            step_size * m[g].array() / (v[g].array().sqrt() + config_.adam_epsilon * std::sqrt(1.0 - b2t));
      }
    }
    report.final_loss = loss(seqs, targets, nullptr);
    return report;
  }

  /// Compares analytic gradients with central differences (step `h`) on a
  /// random subset of at most `coords_per_group` coordinates of every group.
  /// Embedding coordinates are drawn from the columns the example uses; the
  /// others have exactly zero gradient. Pairs where both gradients are below
  /// `floor` in magnitude are not compared relatively.
  GradientCheckReport gradient_check(const TrainingExample& example, std::uint64_t seed = 0, double h = 1e-4,
                                     int coords_per_group = 128, double floor = 1e-7) {
    GradientCheckReport report;
    const std::vector<TokenSequence> seqs{encode_tokens(example.cell)};
    const std::vector<double> targets{example.accuracy};
    if (predict_tokens(seqs).front() == example.accuracy) {
      report.excluded = true;
      return report;
    }
    std::vector<Eigen::MatrixXd> grads;
    loss(seqs, targets, &grads);

    std::vector<bool> used_inputs(kInputVocab, false);
    std::vector<bool> used_ops(kNumOperators, false);
    for (std::size_t t = 0; t < seqs[0].tokens.size(); ++t) {
      (t % 4 < 2 ? used_inputs : used_ops)[static_cast<std::size_t>(seqs[0].tokens[t])] = true;
    }

    Rng rng(seed);
    for (std::size_t g = 0; g < params_.size(); ++g) {
      auto& value = params_[g].value;
      std::vector<Eigen::Index> candidates;
      for (Eigen::Index idx = 0; idx < value.size(); ++idx) {
        const Eigen::Index col = idx / value.rows();
        if (g == 0 && !used_inputs[static_cast<std::size_t>(col)]) continue;
        if (g == 1 && !used_ops[static_cast<std::size_t>(col)]) continue;
        candidates.push_back(idx);
      }
      rng.shuffle(candidates);
      if (candidates.size() > static_cast<std::size_t>(coords_per_group)) {
        candidates.resize(static_cast<std::size_t>(coords_per_group));
      }
      double worst = 0.0;
      for (Eigen::Index idx : candidates) {
        double& p = value.data()[idx];
        const double saved = p;
        p = saved + h;
        const double plus = loss(seqs, targets, nullptr);
        p = saved - h;
        const double minus = loss(seqs, targets, nullptr);
        p = saved;
        const double numeric = (plus - minus) / (2.0 * h);
        const double analytic = grads[g].data()[idx];
        const double scale = std::max(std::abs(numeric), std::abs(analytic));
        if (scale >= floor) worst = std::max(worst, std::abs(numeric - analytic) / scale);
        ++report.coordinates_checked;
      }
      report.per_group[params_[g].name] = worst;
      report.max_relative_error = std::max(report.max_relative_error, worst);
    }
    return report;
  }

  nlohmann::json to_json() const {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& g : params_) {
      std::vector<double> data(g.value.data(), g.value.data() + g.value.size());
      params.push_back({{"name", g.name}, {"rows", g.value.rows()}, {"cols", g.value.cols()}, {"data", data}});
    }
    return {{"config", config_to_json(config_)}, {"params", std::move(params)}};
  }

  static Predictor from_json(const nlohmann::json& j) {
    Predictor p(config_from_json(j.at("config")));
    const auto& params = j.at("params");
    if (params.size() != p.params_.size()) throw ParseError("checkpoint parameter group count mismatch");
    for (std::size_t g = 0; g < params.size(); ++g) {
      const auto& pj = params[g];
      auto& group = p.params_[g];
      if (pj.at("name").get<std::string>() != group.name || pj.at("rows").get<Eigen::Index>() != group.value.rows() ||
          pj.at("cols").get<Eigen::Index>() != group.value.cols()) {
        throw ParseError("checkpoint group '" + pj.at("name").get<std::string>() + "' does not match the config");
      }
      const auto data = pj.at("data").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(data.size()) != group.value.size()) {
        throw ParseError("checkpoint group '" + group.name + "' has the wrong number of values");
      }
      std::copy(data.begin(), data.end(), group.value.data());
    }
    return p;
  }

  static nlohmann::json config_to_json(const PredictorConfig& c) {
    return {{"kind", predictor_kind_name(c.kind)},
            {"embed_dim", c.embed_dim},
            {"hidden", c.hidden},
            {"mlp_layers", c.mlp_layers},
            {"embed_init", c.embed_init},
            {"final_bias_init", c.final_bias_init},
            {"output_init", c.output_init},
            {"forget_bias_init", c.forget_bias_init},
            {"lr_first_level", c.lr_first_level},
            {"lr_later_levels", c.lr_later_levels},
            {"epochs_first_level", c.epochs_first_level},
            {"epochs_later_levels", c.epochs_later_levels},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_epsilon", c.adam_epsilon},
            {"seed", c.seed}};
  }

  static PredictorConfig config_from_json(const nlohmann::json& j) {
    PredictorConfig c;
    c.kind = parse_predictor_kind(j.at("kind").get<std::string>());
    c.embed_dim = j.at("embed_dim");
    c.hidden = j.at("hidden");
    c.mlp_layers = j.at("mlp_layers");
    c.embed_init = j.at("embed_init");
    c.final_bias_init = j.at("final_bias_init");
    c.output_init = j.at("output_init");
    c.forget_bias_init = j.at("forget_bias_init");
    c.lr_first_level = j.at("lr_first_level");
    c.lr_later_levels = j.at("lr_later_levels");
    c.epochs_first_level = j.at("epochs_first_level");
    c.epochs_later_levels = j.at("epochs_later_levels");
    c.adam_beta1 = j.at("adam_beta1");
    c.adam_beta2 = j.at("adam_beta2");
    c.adam_epsilon = j.at("adam_epsilon");
    c.seed = j.at("seed");
    return c;
  }

 private:
  const Eigen::MatrixXd& P(std::size_t g) const { return params_[g].value; }

  // ---- MLP -------------------------------------------------------------

  // Column j = mean over blocks of the concatenated block embeddings.
  Eigen::MatrixXd mlp_features(const std::vector<TokenSequence>& seqs) const {
    const int D = config_.embed_dim;
    const auto& ein = P(0);
    const auto& eop = P(1);
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(4 * D, static_cast<Eigen::Index>(seqs.size()));
    for (std::size_t j = 0; j < seqs.size(); ++j) {
      const auto& t = seqs[j].tokens;
      const double inv = 1.0 / seqs[j].num_blocks();
      auto col = x.col(static_cast<Eigen::Index>(j));
      for (std::size_t k = 0; k < t.size(); k += 4) {
        col.segment(0, D) += inv * ein.col(t[k]);
        col.segment(D, D) += inv * ein.col(t[k + 1]);
        col.segment(2 * D, D) += inv * eop.col(t[k + 2]);
        col.segment(3 * D, D) += inv * eop.col(t[k + 3]);
      }
    }
    return x;
  }

  std::size_t mlp_out_index() const { return 2 + 2 * static_cast<std::size_t>(config_.mlp_layers); }

  double mlp_loss(const std::vector<TokenSequence>& seqs, const std::vector<double>& targets,
                  std::vector<Eigen::MatrixXd>* grads) const {
    const int D = config_.embed_dim;
    const auto L = static_cast<std::size_t>(config_.mlp_layers);
    const auto n = static_cast<Eigen::Index>(seqs.size());
    std::vector<Eigen::MatrixXd> acts;  // acts[0] = features, acts[l+1] = tanh output of layer l
    acts.push_back(mlp_features(seqs));
    for (std::size_t l = 0; l < L; ++l) {
      Eigen::MatrixXd a = P(2 + 2 * l) * acts.back();
      a.colwise() += P(3 + 2 * l).col(0);
      acts.push_back(a.array().tanh().matrix());
    }
    const std::size_t out = mlp_out_index();
    const Eigen::RowVectorXd z = (P(out) * acts.back()).array() + P(out + 1)(0, 0);

    double total = 0.0;
    Eigen::RowVectorXd dz(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double p = detail::sigmoid(z(j));
      const double r = p - targets[static_cast<std::size_t>(j)];
      total += std::abs(r);
      const double s = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
      dz(j) = s * p * (1.0 - p) / static_cast<double>(n);
    }
    if (!grads) return total / static_cast<double>(n);

    auto& g = *grads;
    g[out] = dz * acts.back().transpose();
    g[out + 1](0, 0) = dz.sum();
    Eigen::MatrixXd dh = P(out).transpose() * dz;
    for (std::size_t l = L; l-- > 0;) {
      const Eigen::MatrixXd da = dh.array() * (1.0 - acts[l + 1].array().square());
      g[2 + 2 * l] = da * acts[l].transpose();
      g[3 + 2 * l] = da.rowwise().sum();
      dh = P(2 + 2 * l).transpose() * da;
    }
    for (std::size_t j = 0; j < seqs.size(); ++j) {
      const auto& t = seqs[j].tokens;
      const double inv = 1.0 / seqs[j].num_blocks();
      const auto col = dh.col(static_cast<Eigen::Index>(j));
      for (std::size_t k = 0; k < t.size(); k += 4) {
        g[0].col(t[k]) += inv * col.segment(0, D);
        g[0].col(t[k + 1]) += inv * col.segment(D, D);
        g[1].col(t[k + 2]) += inv * col.segment(2 * D, D);
        g[1].col(t[k + 3]) += inv * col.segment(3 * D, D);
      }
    }
    return total / static_cast<double>(n);
  }

  // Inference path: the first layer is linear in the averaged embeddings, so
  // each (slot, token) column of W1 * embedding is tabulated once.
  std::vector<double> mlp_logits_fast(const std::vector<TokenSequence>& seqs) const {
    const int D = config_.embed_dim;
    const auto& w1 = P(2);
    const std::array<Eigen::MatrixXd, 4> table = {
        w1.middleCols(0, D) * P(0), w1.middleCols(D, D) * P(0),
        w1.middleCols(2 * D, D) * P(1), w1.middleCols(3 * D, D) * P(1)};
    const auto n = static_cast<Eigen::Index>(seqs.size());
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(w1.rows(), n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto& t = seqs[static_cast<std::size_t>(j)].tokens;
      auto col = a.col(j);
      for (std::size_t k = 0; k < t.size(); ++k) col += table[k % 4].col(t[k]);
      col /= static_cast<double>(t.size() / 4);
    }
    a.colwise() += P(3).col(0);
    Eigen::MatrixXd h = a.array().tanh().matrix();
    for (std::size_t l = 1; l < static_cast<std::size_t>(config_.mlp_layers); ++l) {
      Eigen::MatrixXd next = P(2 + 2 * l) * h;
      next.colwise() += P(3 + 2 * l).col(0);
      h = next.array().tanh().matrix();
    }
    const std::size_t out = mlp_out_index();
    const Eigen::RowVectorXd z = (P(out) * h).array() + P(out + 1)(0, 0);
    return std::vector<double>(z.data(), z.data() + z.size());
  }

  // ---- LSTM ------------------------------------------------------------

  // Indices of equal-length sequences, keyed by token count.
  static std::map<std::size_t, std::vector<std::size_t>> group_by_length(const std::vector<TokenSequence>& seqs) {
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t j = 0; j < seqs.size(); ++j) groups[seqs[j].tokens.size()].push_back(j);
    return groups;
  }

  // Input-side gate pre-activations W_x e + b depend only on the token, so
  // they are tabulated per vocabulary entry; the backward pass accumulates
  // gate gradients per token and maps them onto W_x and the embeddings once.
  double lstm_loss(const std::vector<TokenSequence>& seqs, const std::vector<double>& targets,
                   std::vector<Eigen::MatrixXd>* grads) const {
    const int H = config_.hidden;
    const auto& wx = P(2);
    const auto& wh = P(3);
    const auto& wout = P(5);
    const double bout = P(6)(0, 0);
    Eigen::MatrixXd in_table = wx * P(0);
    Eigen::MatrixXd op_table = wx * P(1);
    in_table.colwise() += P(4).col(0);
    op_table.colwise() += P(4).col(0);
    Eigen::MatrixXd in_acc, op_acc;
    if (grads) {
      in_acc.setZero(4 * H, kInputVocab);
      op_acc.setZero(4 * H, kNumOperators);
    }
    const double n_total = static_cast<double>(seqs.size());
    double total = 0.0;

    for (const auto& [len, idx] : group_by_length(seqs)) {
      const auto n = static_cast<Eigen::Index>(idx.size());
      const std::size_t T = len;
      auto token = [&](std::size_t t, Eigen::Index j) { return seqs[idx[static_cast<std::size_t>(j)]].tokens[t]; };
      std::vector<Eigen::MatrixXd> gates(T), cs(T + 1), hs(T + 1), tcs(T);
      cs[0] = Eigen::MatrixXd::Zero(H, n);
      hs[0] = Eigen::MatrixXd::Zero(H, n);
      for (std::size_t t = 0; t < T; ++t) {
        Eigen::MatrixXd g(4 * H, n);
        g.noalias() = wh * hs[t];
        const auto& table = t % 4 < 2 ? in_table : op_table;
        for (Eigen::Index j = 0; j < n; ++j) g.col(j) += table.col(token(t, j));
        g.topRows(3 * H) = (1.0 / (1.0 + (-g.topRows(3 * H)).array().exp())).matrix();
        g.bottomRows(H) = g.bottomRows(H).array().tanh().matrix();
        cs[t + 1] = g.middleRows(H, H).cwiseProduct(cs[t]) + g.topRows(H).cwiseProduct(g.bottomRows(H));
        tcs[t] = cs[t + 1].array().tanh().matrix();
        hs[t + 1] = g.middleRows(2 * H, H).cwiseProduct(tcs[t]);
        gates[t] = std::move(g);
      }
      const Eigen::RowVectorXd z = (wout * hs[T]).array() + bout;
      Eigen::RowVectorXd dz(n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const double p = detail::sigmoid(z(j));
        const double r = p - targets[idx[static_cast<std::size_t>(j)]];
        total += std::abs(r);
        const double s = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
        dz(j) = s * p * (1.0 - p) / n_total;
      }
      if (!grads) continue;

      auto& g = *grads;
      g[5] += dz * hs[T].transpose();
      g[6](0, 0) += dz.sum();
      Eigen::MatrixXd dh = wout.transpose() * dz;
      Eigen::MatrixXd dc = Eigen::MatrixXd::Zero(H, n);
      Eigen::MatrixXd dg(4 * H, n);
      Eigen::ArrayXXd dca(H, n);
      for (std::size_t t = T; t-- > 0;) {
        const auto& gt = gates[t];
        const auto i = gt.topRows(H).array();
        const auto f = gt.middleRows(H, H).array();
        const auto o = gt.middleRows(2 * H, H).array();
        const auto gg = gt.bottomRows(H).array();
        const auto tc = tcs[t].array();
        dca = dc.array() + dh.array() * o * (1.0 - tc.square());
        dg.topRows(H) = (dca * gg * i * (1.0 - i)).matrix();
        dg.middleRows(H, H) = (dca * cs[t].array() * f * (1.0 - f)).matrix();
        dg.middleRows(2 * H, H) = (dh.array() * tc * o * (1.0 - o)).matrix();
        dg.bottomRows(H) = (dca * i * (1.0 - gg.square())).matrix();
        dc = (dca * f).matrix();
        g[3].noalias() += dg * hs[t].transpose();
        auto& acc = t % 4 < 2 ? in_acc : op_acc;
        for (Eigen::Index j = 0; j < n; ++j) acc.col(token(t, j)) += dg.col(j);
        if (t > 0) dh.noalias() = wh.transpose() * dg;
      }
    }
    if (grads) {
      auto& g = *grads;
      g[2].noalias() = in_acc * P(0).transpose() + op_acc * P(1).transpose();
      g[4] = in_acc.rowwise().sum() + op_acc.rowwise().sum();
      g[0].noalias() = wx.transpose() * in_acc;
      g[1].noalias() = wx.transpose() * op_acc;
    }
    return total / n_total;
  }

  // Inference path: input-side gate contributions are tabulated per token.
  std::vector<double> lstm_logits_fast(const std::vector<TokenSequence>& seqs) const {
    const int H = config_.hidden;
    Eigen::MatrixXd in_table = P(2) * P(0);
    Eigen::MatrixXd op_table = P(2) * P(1);
    in_table.colwise() += P(4).col(0);
    op_table.colwise() += P(4).col(0);
    const auto& wh = P(3);
    std::vector<double> out(seqs.size());
    for (const auto& [len, idx] : group_by_length(seqs)) {
      const auto n = static_cast<Eigen::Index>(idx.size());
      Eigen::MatrixXd c = Eigen::MatrixXd::Zero(H, n);
      Eigen::MatrixXd h = Eigen::MatrixXd::Zero(H, n);
      Eigen::MatrixXd g(4 * H, n);
      for (std::size_t t = 0; t < len; ++t) {
        g.noalias() = wh * h;
        const auto& table = t % 4 < 2 ? in_table : op_table;
        for (Eigen::Index j = 0; j < n; ++j) g.col(j) += table.col(seqs[idx[static_cast<std::size_t>(j)]].tokens[t]);
        g.topRows(3 * H) = (1.0 / (1.0 + (-g.topRows(3 * H)).array().exp())).matrix();
        g.bottomRows(H) = g.bottomRows(H).array().tanh().matrix();
        c = g.middleRows(H, H).cwiseProduct(c) + g.topRows(H).cwiseProduct(g.bottomRows(H));
        h = g.middleRows(2 * H, H).cwiseProduct(c.array().tanh().matrix());
      }
      const Eigen::RowVectorXd z = (P(5) * h).array() + P(6)(0, 0);
      for (Eigen::Index j = 0; j < n; ++j) out[idx[static_cast<std::size_t>(j)]] = z(j);
    }
    return out;
  }

  PredictorConfig config_;
  std::vector<ParamGroup> params_;
};

/// Mean absolute error of `model` on `data`.
inline double mean_absolute_error(const Predictor& model, const std::vector<TrainingExample>& data) {
  std::vector<CellSpec> cells;
  for (const auto& ex : data) cells.push_back(ex.cell);
  const auto pred = model.predict(cells);
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) total += std::abs(pred[i] - data[i].accuracy);
  return total / static_cast<double>(data.size());
}

/// Indices each ensemble member leaves out. With n >= members the shuffled
/// indices are dealt into `members` disjoint folds; with fewer points member
/// m omits the m-th shuffled point (none once they run out, and none at all
/// for a single point).
inline std::vector<std::vector<std::size_t>> ensemble_omissions(std::size_t n, int members, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "ensemble-folds"));
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> omit(static_cast<std::size_t>(members));
  if (n >= static_cast<std::size_t>(members)) {
    for (std::size_t i = 0; i < n; ++i) omit[i % static_cast<std::size_t>(members)].push_back(order[i]);
  } else if (n > 1) {
    for (std::size_t m = 0; m < n; ++m) omit[m].push_back(order[m]);
  }
  return omit;
}

/// Anything that can be refit on all data seen so far and score cells.
class Surrogate {
 public:
  virtual ~Surrogate() = default;
  virtual void fit(const std::vector<TrainingExample>& data, int level) = 0;
  virtual std::vector<double> predict(const std::vector<CellSpec>& cells) const = 0;
  virtual std::string name() const = 0;
};

/// `size` predictors, each refit from scratch on the data minus its fold;
/// predictions are the arithmetic mean of the members.
class Ensemble : public Surrogate {
 public:
  static constexpr int kDefaultSize = 5;

  explicit Ensemble(PredictorConfig config, int size = kDefaultSize, int parallelism = 1)
      : config_(std::move(config)), size_(size), parallelism_(std::max(1, parallelism)) {
    if (size_ < 1) throw ConfigError("ensemble size must be >= 1");
    config_.validate();
    for (int m = 0; m < size_; ++m) members_.emplace_back(member_config(m));
  }

  static Ensemble from_members(std::vector<Predictor> members) {
    if (members.empty()) throw ConfigError("ensemble needs at least one member");
    Ensemble e(members.front().config(), static_cast<int>(members.size()));
    e.members_ = std::move(members);
    return e;
  }

  const std::vector<Predictor>& members() const { return members_; }
  int size() const { return size_; }

  std::string name() const override {
    return std::string(predictor_kind_name(config_.kind)) + (size_ > 1 ? "-ens" : "");
  }

  /// Member seed m is derived from the ensemble seed; a single-member
  /// ensemble uses the configured seed directly.
  PredictorConfig member_config(int m) const {
    PredictorConfig c = config_;
    if (size_ > 1) c.seed = derive_seed(config_.seed, static_cast<std::uint64_t>(m));
    return c;
  }

  void fit(const std::vector<TrainingExample>& data, int level) override {
    detail::validate_examples(data);
    const auto omit = size_ > 1 ? ensemble_omissions(data.size(), size_, config_.seed)
                                : std::vector<std::vector<std::size_t>>(1);
    auto fit_member = [&](int m) {
      std::vector<bool> skip(data.size(), false);
      for (std::size_t i : omit[static_cast<std::size_t>(m)]) skip[i] = true;
      std::vector<TrainingExample> subset;
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (!skip[i]) subset.push_back(data[i]);
      }
      Predictor p(member_config(m));
      p.fit(subset, level);
      return p;
    };
    std::vector<Predictor> fitted(static_cast<std::size_t>(size_));
    if (parallelism_ == 1) {
      for (int m = 0; m < size_; ++m) fitted[static_cast<std::size_t>(m)] = fit_member(m);
    } else {
      for (int start = 0; start < size_; start += parallelism_) {
        std::vector<std::future<Predictor>> jobs;
        for (int m = start; m < std::min(size_, start + parallelism_); ++m) {
          jobs.push_back(std::async(std::launch::async, fit_member, m));
        }
        for (std::size_t k = 0; k < jobs.size(); ++k) fitted[static_cast<std::size_t>(start) + k] = jobs[k].get();
      }
    }
    members_ = std::move(fitted);
  }

  std::vector<double> predict(const std::vector<CellSpec>& cells) const override {
    std::vector<double> mean(cells.size(), 0.0);
    for (const auto& m : members_) {
      const auto p = m.predict(cells);
      for (std::size_t i = 0; i < p.size(); ++i) mean[i] += p[i];
    }
    for (double& v : mean) v /= static_cast<double>(members_.size());
    return mean;
  }

  nlohmann::json to_json() const {
    nlohmann::json members = nlohmann::json::array();
    for (const auto& m : members_) members.push_back(m.to_json());
    return {{"format", "pnas-ensemble"},
            {"version", 1},
            {"config", Predictor::config_to_json(config_)},
            {"members", std::move(members)}};
  }

  static Ensemble from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "pnas-ensemble") throw ParseError("not an ensemble checkpoint");
    if (j.value("version", 0) != 1) throw ParseError("unsupported ensemble checkpoint version");
    std::vector<Predictor> members;
    for (const auto& mj : j.at("members")) members.push_back(Predictor::from_json(mj));
    Ensemble e = from_members(std::move(members));
    e.config_ = Predictor::config_from_json(j.at("config"));
    return e;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write checkpoint '" + path + "'");
    out << to_json().dump() << '\n';
  }

  static Ensemble load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read checkpoint '" + path + "'");
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("checkpoint '" + path + "': " + e.what());
    }
  }

 private:
  PredictorConfig config_;
  int size_;
  int parallelism_;
  std::vector<Predictor> members_;
};

}  // namespace pnas
