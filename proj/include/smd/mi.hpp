#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

// Mutual-information machinery: the softplus (Jensen-Shannon) infomax lower
// bound, Donsker-Varadhan KL estimation with a statistics network, entropy
// estimation against a standard-normal reference, and the bounded
// disentanglement ratio R_I(a; c) = I(a; c) / H(c). All values are in nats.
namespace smd::mi {

// log(1 + e^r), evaluated as max(r, 0) + log1p(exp(-|r|)).
double softplus(double r);
torch::Tensor softplus(const torch::Tensor& r);

// l_i = (i + 1) mod n: a permutation without fixed points.
std::vector<std::int64_t> cyclic_derangement(std::int64_t n);
bool is_derangement(const std::vector<std::int64_t>& perm);
// Uniformly random derangement (rejection sampling).
std::vector<std::int64_t> random_derangement(std::int64_t n, std::uint64_t seed);

// Matched pairs (u_i, v_i) and shuffled pairs (u_i, v_{l_i}).
struct PairBatch {
  torch::Tensor u;
  torch::Tensor v;
  torch::Tensor v_shuffled;
  std::vector<std::int64_t> permutation;

  [[nodiscard]] std::int64_t size() const { return u.size(0); }
};

// Throws ValidationError when N < 2 or the permutation has a fixed point.
PairBatch make_pair_batch(const torch::Tensor& u, const torch::Tensor& v,
                          std::vector<std::int64_t> permutation = {});

enum class Estimator { deep_infomax_bound, mine_dv };
std::string to_string(Estimator e);

struct MIEstimate {
  double value = 0.0;
  std::int64_t n_samples = 0;
  Estimator estimator = Estimator::deep_infomax_bound;
};

// Differentiable empirical bound
//   mean_i[-sp(-T(u_i, v_i))] - mean_i[sp(T(u_i, v_{l_i}))]
// from critic scores on matched and shuffled pairs.
torch::Tensor deep_infomax_bound(const torch::Tensor& matched_scores,
                                 const torch::Tensor& shuffled_scores);

// Value of the bound for a critic over a pair batch.
template <typename CriticFn>
MIEstimate deep_infomax_bound(CriticFn&& critic, const PairBatch& batch) {
  auto value = deep_infomax_bound(critic(batch.u, batch.v), critic(batch.u, batch.v_shuffled));
  return {value.template item<double>(), batch.size(), Estimator::deep_infomax_bound};
}

// Fully connected statistics / critic network: in -> width -> width -> 1 with
// LeakyReLU, final layer zero-initialised. Weights are drawn from a private
// generator so that estimation calls do not touch global RNG state.
class StatisticsNetworkImpl : public torch::nn::Module {
 public:
  StatisticsNetworkImpl(std::int64_t in_dim, std::int64_t width, std::uint64_t seed);
  torch::Tensor forward(torch::Tensor x);  // [N]

 private:
  torch::nn::Linear l1_{nullptr}, l2_{nullptr}, l3_{nullptr};
};
TORCH_MODULE(StatisticsNetwork);

struct MineOptions {
  int train_steps = 3000;
  std::int64_t batch_size = 512;
  double learning_rate = 5e-4;
  double ema_rate = 0.01;
  std::int64_t width = 128;
  std::uint64_t seed = 0;
};

struct KlEstimate {
  double value = 0.0;
  std::int64_t n_p = 0;
  std::int64_t n_q = 0;
  int train_steps = 0;
};

// Donsker-Varadhan bound sup_T E_p[T] - log E_q[e^T] with a fresh statistics
// network trained for `train_steps` Adam steps (moving-average corrected
// gradient of the log-partition term). Samples are [N, d] rows.
KlEstimate mine_dv_kl(const torch::Tensor& samples_p, const torch::Tensor& samples_q,
                      const MineOptions& opts);
// Trains on one pair of sample sets and reports the bound on another.
KlEstimate mine_dv_kl(const torch::Tensor& train_p, const torch::Tensor& train_q,
                      const torch::Tensor& eval_p, const torch::Tensor& eval_q,
                      const MineOptions& opts);

// Trains a fresh vector critic T(u, v) on the infomax bound and returns the
// bound over all samples with the cyclic derangement.
MIEstimate fit_infomax_bound(const torch::Tensor& u, const torch::Tensor& v,
                             const MineOptions& opts);

struct EntropyEstimate {
  double value = 0.0;               // nats
  double cross_entropy_term = 0.0;  // -(1/N) sum log q(c_i)
  double kl_correction = 0.0;       // D_KL[p(c) || q]
  std::int64_t n_samples = 0;
};

inline constexpr std::int64_t kMinEntropySamples = 100;

// H(c) = -E_p[log q(c)] - D_KL[p(c) || q], q the standard normal of matching
// dimension after per-dimension standardization of c (equivalently
// q = N(mean, diag(var)) of the samples). Throws ValidationError("insufficient samples") below 100 rows
// and NumericalError("degenerate p(c)") when the sample covariance is
// singular (e.g. constant samples).
EntropyEstimate estimate_entropy(const torch::Tensor& c_samples, const MineOptions& opts);

// Plug-in entropy of the empirical distribution over distinct rows.
double discrete_entropy(const torch::Tensor& samples);
std::int64_t count_distinct_rows(const torch::Tensor& samples);

enum class EntropyMode { automatic, differential, discrete };

struct RatioOptions {
  MineOptions mine;
  EntropyMode entropy_mode = EntropyMode::automatic;
  // Rescale every c dimension to zero mean / unit variance before estimation.
  bool standardize_c = false;
  // Number of independent shuffles used to draw product-of-marginals samples.
  int product_shuffles = 4;
  // Fraction of rows held out from MINE training and used for the reported
  // I(a; c). In-sample estimates are biased upward on small sample sets.
  double holdout_fraction = 0.0;
};

struct RatioReport {
  double ratio = 0.0;      // clamped to [0, 1]
  double raw_ratio = 0.0;  // I / H before clamping
  bool clamped = false;
  std::string clamp_reason;
  KlEstimate mutual_information;  // D_KL[p(a, c) || p(a) p(c)]
  double entropy = 0.0;
  bool discrete_entropy = false;
  EntropyEstimate entropy_detail;  // filled for the differential estimator
  std::int64_t n_samples = 0;
  std::uint64_t seed = 0;
};

RatioReport ratio_RI(const torch::Tensor& a_samples, const torch::Tensor& c_samples,
                     const RatioOptions& opts);

// Text table (estimator, value_nats, n_samples, seed, clamped_flag) and the
// equivalent key=value lines.
std::string format_report_table(const RatioReport& r);
std::string format_report_kv(const RatioReport& r);

}  // namespace smd::mi
