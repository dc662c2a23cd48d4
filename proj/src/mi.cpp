#include "smd/mi.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "smd/config.hpp"
#include "smd/error.hpp"

namespace smd::mi {
namespace {

torch::Tensor as_rows(const torch::Tensor& t, const char* what) {
  if (t.dim() == 1) return t.unsqueeze(1).to(torch::kFloat64);
  if (t.dim() != 2) throw ValidationError(std::string(what) + ": samples must be [N, d]");
  return t.to(torch::kFloat64);
}

void require_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw NumericalError(std::string(what) + ": non-finite samples");
  }
}

torch::Tensor index_rows(const torch::Tensor& t, const std::vector<std::int64_t>& idx) {
  return t.index_select(0, torch::tensor(idx, torch::kLong));
}

std::vector<std::int64_t> draw_indices(std::mt19937_64& rng, std::int64_t n, std::int64_t k) {
  std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(k));
  for (auto& i : idx) i = pick(rng);
  return idx;
}

// log E[e^T] over all rows, without autograd.
double log_mean_exp(StatisticsNetwork& net, const torch::Tensor& x) {
  torch::NoGradGuard guard;
  return (torch::logsumexp(net->forward(x), 0) - std::log(static_cast<double>(x.size(0))))
      .item<double>();
}

double mean_score(StatisticsNetwork& net, const torch::Tensor& x) {
  torch::NoGradGuard guard;
  return net->forward(x).mean().item<double>();
}

std::uint64_t shuffle_seed(std::uint64_t seed, int k) {
  return seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(k) * 0xbf58476d1ce4e5b9ULL + 1;
}

constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

}  // namespace

double softplus(double r) { return std::max(r, 0.0) + std::log1p(std::exp(-std::abs(r))); }

torch::Tensor softplus(const torch::Tensor& r) {
  return torch::clamp_min(r, 0.0) + torch::log1p(torch::exp(-torch::abs(r)));
}

std::vector<std::int64_t> cyclic_derangement(std::int64_t n) {
  std::vector<std::int64_t> p(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = (i + 1) % n;
  return p;
}

bool is_derangement(const std::vector<std::int64_t>& perm) {
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const auto j = perm[i];
    if (j < 0 || static_cast<std::size_t>(j) >= perm.size() || seen[static_cast<std::size_t>(j)] ||
        static_cast<std::size_t>(j) == i) {
      return false;
    }
    seen[static_cast<std::size_t>(j)] = true;
  }
  return true;
}

std::vector<std::int64_t> random_derangement(std::int64_t n, std::uint64_t seed) {
  if (n < 2) throw ValidationError("a derangement needs at least 2 elements");
  std::mt19937_64 rng(seed);
  std::vector<std::int64_t> p(static_cast<std::size_t>(n));
  do {
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), rng);
  } while (!is_derangement(p));
  return p;
}

PairBatch make_pair_batch(const torch::Tensor& u, const torch::Tensor& v,
                          std::vector<std::int64_t> permutation) {
  if (u.size(0) != v.size(0)) throw ValidationError("pair batch: u and v differ in length");
  const auto n = u.size(0);
  if (n < 2) throw ValidationError("pair batch: N must be >= 2 to form shuffled pairs");
  if (permutation.empty()) permutation = cyclic_derangement(n);
  if (static_cast<std::int64_t>(permutation.size()) != n || !is_derangement(permutation)) {
    throw ValidationError("pair batch: shuffle must be a permutation without fixed points");
  }
  PairBatch b;
  b.u = u;
  b.v = v;
  b.v_shuffled = index_rows(v, permutation);
  b.permutation = std::move(permutation);
  return b;
}

std::string to_string(Estimator e) {
  return e == Estimator::deep_infomax_bound ? "deep_infomax_bound" : "mine_dv";
}

torch::Tensor deep_infomax_bound(const torch::Tensor& matched_scores,
                                 const torch::Tensor& shuffled_scores) {
  if (matched_scores.numel() < 2 || matched_scores.numel() != shuffled_scores.numel()) {
    throw ValidationError("infomax bound: need N >= 2 matched and shuffled scores of equal count");
  }
  return (-mi::softplus(-matched_scores)).mean() - mi::softplus(shuffled_scores).mean();
}

StatisticsNetworkImpl::StatisticsNetworkImpl(std::int64_t in_dim, std::int64_t width,
                                             std::uint64_t seed) {
  using namespace torch::nn;
  l1_ = register_module("l1", Linear(in_dim, width));
  l2_ = register_module("l2", Linear(width, width));
  l3_ = register_module("l3", Linear(width, 1));
  auto gen = at::detail::createCPUGenerator(seed);
  torch::NoGradGuard guard;
  for (auto* layer : {&l1_, &l2_}) {
    auto& w = (*layer)->weight;
    const double std_dev = std::sqrt(2.0 / static_cast<double>(w.size(1)));
    w.copy_(torch::randn(w.sizes(), gen, torch::kFloat32) * std_dev);
    (*layer)->bias.zero_();
  }
  l3_->weight.zero_();
  l3_->bias.zero_();
}

torch::Tensor StatisticsNetworkImpl::forward(torch::Tensor x) {
  x = torch::leaky_relu(l1_(x), 0.2);
  x = torch::leaky_relu(l2_(x), 0.2);
  return l3_(x).squeeze(1);
}

namespace {

StatisticsNetwork train_statistics_network(const torch::Tensor& p, const torch::Tensor& q,
                                           const MineOptions& opts) {
  StatisticsNetwork net(p.size(1), opts.width, opts.seed);
  net->to(torch::kFloat64);
  torch::optim::Adam optim(net->parameters(), torch::optim::AdamOptions(opts.learning_rate));
  std::mt19937_64 rng(opts.seed ^ 0x6d696e65ULL);

  double ema = -1.0;
  for (int step = 0; step < opts.train_steps; ++step) {
    const auto bp = index_rows(p, draw_indices(rng, p.size(0), std::min(opts.batch_size, p.size(0))));
    const auto bq = index_rows(q, draw_indices(rng, q.size(0), std::min(opts.batch_size, q.size(0))));
    optim.zero_grad();
    const auto tp = net->forward(bp);
    const auto tq = net->forward(bq);
    const auto mean_exp = torch::exp(torch::logsumexp(tq, 0) - std::log(static_cast<double>(bq.size(0))));
    const double batch_mean = mean_exp.item<double>();
    ema = ema < 0.0 ? batch_mean : (1.0 - opts.ema_rate) * ema + opts.ema_rate * batch_mean;
    // d/dθ log E[e^T] ≈ E[∇T e^T] / ema
    const auto loss = -(tp.mean() - mean_exp / ema);
    if (!std::isfinite(loss.item<double>()) || !std::isfinite(ema)) {
      std::ostringstream msg;
      msg << "mine_dv_kl: non-finite value at step " << step << " (ema=" << ema
          << ", batch E_q[e^T]=" << batch_mean << ")";
      throw NumericalError(msg.str());
    }
    loss.backward();
    optim.step();
  }
  return net;
}

void check_kl_inputs(const torch::Tensor& p, const torch::Tensor& q) {
  if (p.size(0) == 0 || q.size(0) == 0) throw ValidationError("mine_dv_kl: empty samples");
  if (p.size(1) != q.size(1)) throw ValidationError("mine_dv_kl: sample dimensions differ");
  require_finite(p, "mine_dv_kl");
  require_finite(q, "mine_dv_kl");
}

}  // namespace

KlEstimate mine_dv_kl(const torch::Tensor& samples_p, const torch::Tensor& samples_q,
                      const MineOptions& opts) {
  const auto p = as_rows(samples_p, "mine_dv_kl");
  const auto q = as_rows(samples_q, "mine_dv_kl");
  return mine_dv_kl(p, q, p, q, opts);
}

KlEstimate mine_dv_kl(const torch::Tensor& train_p, const torch::Tensor& train_q,
                      const torch::Tensor& eval_p, const torch::Tensor& eval_q,
                      const MineOptions& opts) {
  const auto p = as_rows(train_p, "mine_dv_kl");
  const auto q = as_rows(train_q, "mine_dv_kl");
  const auto ep = as_rows(eval_p, "mine_dv_kl");
  const auto eq = as_rows(eval_q, "mine_dv_kl");
  check_kl_inputs(p, q);
  check_kl_inputs(ep, eq);
  if (ep.size(1) != p.size(1)) throw ValidationError("mine_dv_kl: sample dimensions differ");

  auto net = train_statistics_network(p, q, opts);
  KlEstimate out;
  out.value = mean_score(net, ep) - log_mean_exp(net, eq);
  out.n_p = ep.size(0);
  out.n_q = eq.size(0);
  out.train_steps = opts.train_steps;
  if (!std::isfinite(out.value)) throw NumericalError("mine_dv_kl: non-finite final estimate");
  return out;
}

MIEstimate fit_infomax_bound(const torch::Tensor& u_in, const torch::Tensor& v_in,
                             const MineOptions& opts) {
  const auto u = as_rows(u_in, "fit_infomax_bound");
  const auto v = as_rows(v_in, "fit_infomax_bound");
  if (u.size(0) != v.size(0) || u.size(0) < 2) {
    throw ValidationError("fit_infomax_bound: need N >= 2 paired samples");
  }
  const auto n = u.size(0);
  StatisticsNetwork net(u.size(1) + v.size(1), opts.width, opts.seed);
  net->to(torch::kFloat64);
  torch::optim::Adam optim(net->parameters(), torch::optim::AdamOptions(opts.learning_rate));
  std::mt19937_64 rng(opts.seed ^ 0x64696dULL);
  const auto critic = [&net](const torch::Tensor& a, const torch::Tensor& b) {
    return net->forward(torch::cat({a, b}, 1));
  };

  const std::int64_t bsz = std::min(opts.batch_size, n);
  for (int step = 0; step < opts.train_steps; ++step) {
    auto idx = draw_indices(rng, n, bsz);
    const auto bu = index_rows(u, idx);
    const auto bv = index_rows(v, idx);
    const auto batch = make_pair_batch(bu, bv);
    optim.zero_grad();
    const auto bound = deep_infomax_bound(critic(batch.u, batch.v), critic(batch.u, batch.v_shuffled));
    const auto loss = -bound;
    if (!std::isfinite(loss.item<double>())) {
      throw NumericalError("fit_infomax_bound: non-finite bound at step " + std::to_string(step));
    }
    loss.backward();
    optim.step();
  }
  torch::NoGradGuard guard;
  return deep_infomax_bound(critic, make_pair_batch(u, v));
}

EntropyEstimate estimate_entropy(const torch::Tensor& c_in, const MineOptions& opts) {
  const auto c = as_rows(c_in, "estimate_entropy");
  const auto n = c.size(0);
  const auto d = c.size(1);
  if (n < kMinEntropySamples) {
    throw ValidationError("insufficient samples: estimate_entropy needs at least " +
                          std::to_string(kMinEntropySamples) + ", got " + std::to_string(n));
  }
  require_finite(c, "estimate_entropy");

  const auto centred = c - c.mean(0, true);
  const auto cov = centred.t().mm(centred) / static_cast<double>(n - 1);
  const auto eig = torch::linalg_eigvalsh(cov);
  const double smallest = eig.min().item<double>();
  const double largest = eig.max().item<double>();
  if (!(largest > 0.0) || smallest <= 1e-12 * largest) {
    throw NumericalError("degenerate p(c): sample covariance is singular, differential entropy diverges");
  }

  // Reference q = N(mean, diag(var)) fitted to the samples, i.e. the standard
  // normal in standardized coordinates z. The KL term is affine invariant, so
  // it is estimated on z; with a fixed N(0, I) reference, e^T has infinite
  // variance under q as soon as p is more than twice as wide.
  const auto mean = c.mean(0, true);
  const auto sd = c.std(0, /*unbiased=*/false, /*keepdim=*/true);
  const auto z = (c - mean) / sd;

  EntropyEstimate out;
  out.n_samples = n;
  out.cross_entropy_term = 0.5 * static_cast<double>(d) * kLog2Pi + sd.log().sum().item<double>() +
                           0.5 * z.pow(2).sum(1).mean().item<double>();

  auto gen = at::detail::createCPUGenerator(opts.seed ^ 0x71ULL);
  const std::int64_t m = std::max<std::int64_t>(n, 20000);
  const auto reference = torch::randn({m, d}, gen, torch::kFloat64);
  out.kl_correction = mine_dv_kl(z, reference, opts).value;
  out.value = out.cross_entropy_term - out.kl_correction;
  return out;
}

std::int64_t count_distinct_rows(const torch::Tensor& samples) {
  const auto s = as_rows(samples, "count_distinct_rows").contiguous();
  std::map<std::vector<double>, std::int64_t> counts;
  const auto d = s.size(1);
  const double* p = s.data_ptr<double>();
  for (std::int64_t i = 0; i < s.size(0); ++i) counts[std::vector<double>(p + i * d, p + (i + 1) * d)]++;
  return static_cast<std::int64_t>(counts.size());
}

double discrete_entropy(const torch::Tensor& samples) {
  const auto s = as_rows(samples, "discrete_entropy").contiguous();
  std::map<std::vector<double>, std::int64_t> counts;
  const auto d = s.size(1);
  const double* p = s.data_ptr<double>();
  for (std::int64_t i = 0; i < s.size(0); ++i) counts[std::vector<double>(p + i * d, p + (i + 1) * d)]++;
  const double n = static_cast<double>(s.size(0));
  double h = 0.0;
  for (const auto& [row, k] : counts) {
    const double q = static_cast<double>(k) / n;
    h -= q * std::log(q);
  }
  return h;
}

RatioReport ratio_RI(const torch::Tensor& a_in, const torch::Tensor& c_in, const RatioOptions& opts) {
  auto a = as_rows(a_in, "ratio_RI");
  auto c = as_rows(c_in, "ratio_RI");
  if (a.size(0) != c.size(0)) throw ValidationError("ratio_RI: a and c sample counts differ");
  const auto n = a.size(0);
  if (n < kMinEntropySamples) {
    throw ValidationError("insufficient samples: ratio_RI needs at least " +
                          std::to_string(kMinEntropySamples));
  }
  require_finite(a, "ratio_RI");
  require_finite(c, "ratio_RI");

  RatioReport r;
  r.n_samples = n;
  r.seed = opts.mine.seed;

  const std::int64_t distinct = count_distinct_rows(c);
  bool discrete = opts.entropy_mode == EntropyMode::discrete;
  if (opts.entropy_mode == EntropyMode::automatic) discrete = distinct <= 64 && distinct * 10 <= n;
  if (distinct < 2) throw NumericalError("degenerate p(c): all c samples are identical");

  if (opts.standardize_c && !discrete) {
    const auto sd = c.std(0, /*unbiased=*/true, /*keepdim=*/true);
    if ((sd <= 0).any().item<bool>()) throw NumericalError("degenerate p(c): a c dimension is constant");
    c = (c - c.mean(0, true)) / sd;
  }

  // Joint samples (a_i, c_i) against product samples (a_i, c_{pi(i)}), drawn
  // separately within each split so held-out rows never meet training rows.
  const auto split = [&](const torch::Tensor& aa, const torch::Tensor& cc, int salt) {
    const auto m = aa.size(0);
    std::vector<torch::Tensor> product;
    for (int s = 0; s < std::max(1, opts.product_shuffles); ++s) {
      const auto perm = random_derangement(m, shuffle_seed(opts.mine.seed + salt, s));
      product.push_back(torch::cat({aa, index_rows(cc, perm)}, 1));
    }
    return std::make_pair(torch::cat({aa, cc}, 1), torch::cat(product, 0));
  };
  const auto n_eval = static_cast<std::int64_t>(std::floor(opts.holdout_fraction * static_cast<double>(n)));
  if (n_eval >= 2 && n - n_eval >= 2) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(shuffle_seed(opts.mine.seed, 0x5e7));
    std::shuffle(order.begin(), order.end(), rng);
    const std::vector<std::int64_t> eval_idx(order.begin(), order.begin() + n_eval);
    const std::vector<std::int64_t> train_idx(order.begin() + n_eval, order.end());
    const auto [tp, tq] = split(index_rows(a, train_idx), index_rows(c, train_idx), 0);
    const auto [ep, eq] = split(index_rows(a, eval_idx), index_rows(c, eval_idx), 1);
    r.mutual_information = mine_dv_kl(tp, tq, ep, eq, opts.mine);
  } else {
    const auto [jp, jq] = split(a, c, 0);
    r.mutual_information = mine_dv_kl(jp, jq, opts.mine);
  }

  r.discrete_entropy = discrete;
  if (discrete) {
    r.entropy = discrete_entropy(c);
  } else {
    MineOptions eo = opts.mine;
    eo.seed = opts.mine.seed + 1;
    r.entropy_detail = estimate_entropy(c, eo);
    r.entropy = r.entropy_detail.value;
  }

  const double info = r.mutual_information.value;
  if (!(r.entropy > 0.0)) {
    r.raw_ratio = std::numeric_limits<double>::infinity();
    r.ratio = 1.0;
    r.clamped = true;
    r.clamp_reason = "non-positive entropy estimate";
    return r;
  }
  r.raw_ratio = info / r.entropy;
  r.ratio = std::clamp(r.raw_ratio, 0.0, 1.0);
  if (r.ratio != r.raw_ratio) {
    r.clamped = true;
    r.clamp_reason = r.raw_ratio < 0.0 ? "negative MI estimate" : "ratio above 1";
  }
  return r;
}

std::string format_report_table(const RatioReport& r) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %14s %10s %20s %8s\n", "estimator", "value_nats",
                "n_samples", "seed", "clamped");
  out << line;
  const auto row = [&](const char* name, double v, bool clamped) {
    std::snprintf(line, sizeof line, "%-22s %14.6f %10lld %20llu %8s\n", name, v,
                  static_cast<long long>(r.n_samples), static_cast<unsigned long long>(r.seed),
                  clamped ? "yes" : "no");
    out << line;
  };
  row("mine_dv I(a;c)", r.mutual_information.value, false);
  row(r.discrete_entropy ? "plugin H(c)" : "ce_minus_kl H(c)", r.entropy, false);
  if (!r.discrete_entropy) {
    row("  cross_entropy", r.entropy_detail.cross_entropy_term, false);
    row("  kl_correction", r.entropy_detail.kl_correction, false);
  }
  row("ratio R_I", r.ratio, r.clamped);
  return out.str();
}

std::string format_report_kv(const RatioReport& r) {
  std::ostringstream out;
  out << "ri_ratio = " << format_double(r.ratio) << "\n";
  out << "ri_raw_ratio = " << format_double(r.raw_ratio) << "\n";
  out << "ri_clamped = " << (r.clamped ? "true" : "false") << "\n";
  out << "ri_clamp_reason = " << (r.clamp_reason.empty() ? "none" : r.clamp_reason) << "\n";
  out << "mi_nats = " << format_double(r.mutual_information.value) << "\n";
  out << "mi_estimator = mine_dv\n";
  out << "entropy_nats = " << format_double(r.entropy) << "\n";
  out << "entropy_estimator = " << (r.discrete_entropy ? "plugin" : "ce_minus_kl") << "\n";
  out << "entropy_cross_entropy = " << format_double(r.entropy_detail.cross_entropy_term) << "\n";
  out << "entropy_kl_correction = " << format_double(r.entropy_detail.kl_correction) << "\n";
  out << "n_samples = " << r.n_samples << "\n";
  out << "seed = " << r.seed << "\n";
  return out.str();
}

}  // namespace smd::mi
