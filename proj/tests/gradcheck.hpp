#pragma once

// Central finite-difference check of analytic parameter gradients, 64-bit.

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "smd/nets.hpp"

namespace gradcheck {

struct Result {
  std::string network;
  int checked = 0;            // parameters with a non-zero gradient that were compared
  int skipped_zero = 0;       // parameters whose analytic and numeric gradients are both ~0
  int skipped_kink = 0;       // stencils that crossed a LeakyReLU or max-pool switch
  double max_rel_error = 0.0;
};

// Probes `loss` (a scalar function of the module's current parameters) at
// random parameter coordinates until `wanted` coordinates with a non-zero
// gradient have been compared. The networks are piecewise smooth; a central
// difference whose stencil switches the branch of any LeakyReLU or max-pool
// does not estimate the derivative, so such coordinates are drawn again.
inline Result check_module(const std::string& name, torch::nn::Module& module,
                           const std::function<torch::Tensor()>& loss, int wanted, std::uint64_t seed,
                           double step = 1e-3) {
  Result r;
  r.network = name;
  auto params = module.parameters();
  std::vector<std::int64_t> sizes;
  std::int64_t total = 0;
  for (auto& p : params) {
    sizes.push_back(p.numel());
    total += p.numel();
  }
  for (auto& p : params) p.mutable_grad() = torch::Tensor();
  loss().backward();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> pick(0, total - 1);
  int attempts = 0;
  while (r.checked < wanted && attempts < 200 * wanted) {
    ++attempts;
    std::int64_t flat = pick(rng);
    std::size_t t = 0;
    while (flat >= sizes[t]) flat -= sizes[t++];
    auto data = params[t].detach().view(-1);
    const double analytic = params[t].grad().view(-1)[flat].item<double>();
    const double orig = data[flat].item<double>();
    double numeric = 0.0;
    bool smooth = true;
    {
      torch::NoGradGuard guard;
      smd::nets::ActivationTrace trace;
      const double centre = loss().item<double>();
      (void)centre;
      const auto sig = trace.signature();
      trace.reset();
      data[flat] = orig + step;
      const double up = loss().item<double>();
      smooth = trace.signature() == sig;
      trace.reset();
      data[flat] = orig - step;
      const double down = loss().item<double>();
      smooth = smooth && trace.signature() == sig;
      data[flat] = orig;
      numeric = (up - down) / (2.0 * step);
    }
    if (!smooth) {
      ++r.skipped_kink;
      continue;
    }
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    if (scale < 1e-9) {
      ++r.skipped_zero;
      continue;
    }
    r.max_rel_error = std::max(r.max_rel_error, std::abs(analytic - numeric) / scale);
    ++r.checked;
  }
  return r;
}

// Float64 copy of freshly created networks with randomised critic score
// layers (they are zero-initialised, which would hide every upstream gradient).
inline smd::nets::Networks double_networks(const smd::nets::NetConfig& cfg, std::uint64_t seed) {
  auto nets = smd::nets::Networks::create(cfg, seed);
  nets.to(torch::kFloat64);
  torch::NoGradGuard guard;
  auto gen = at::detail::createCPUGenerator(seed + 1);
  for (auto* critic : {&nets.infomax_critic, &nets.discriminator}) {
    for (auto& p : (*critic)->named_parameters()) {
      if (p.key().rfind("score", 0) == 0) p.value().copy_(torch::randn(p.value().sizes(), gen, torch::kFloat64) * 0.5);
    }
  }
  return nets;
}

// All five networks, each with a weighted-sum probe loss.
inline std::vector<Result> check_all(const smd::nets::NetConfig& cfg, std::uint64_t seed, int wanted) {
  using namespace smd::nets;
  auto nets = double_networks(cfg, seed);
  torch::manual_seed(seed + 7);
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  const auto x = torch::rand({1, 1, cfg.height, cfg.width}, opts);
  const auto a = torch::softmax(torch::randn({1, cfg.anatomy_channels, cfg.height, cfg.width}, opts), 1);
  const auto c = torch::randn({1, kContrastDim}, opts);
  const auto w_a = torch::randn({1, cfg.anatomy_channels, cfg.height, cfg.width}, opts);
  const auto w_x = torch::randn({1, 1, cfg.height, cfg.width}, opts);
  const auto w_c = torch::randn({1, kContrastDim}, opts);
  const auto w_s = torch::randn({1}, opts);

  std::vector<Result> out;
  out.push_back(check_module("anatomy_encoder", *nets.anatomy, [&] {
    return (encode_anatomy(nets, x, AnatomyMode::soft, 0.5) * w_a).sum();
  }, wanted, seed));
  out.push_back(check_module("contrast_encoder", *nets.contrast, [&] {
    return (encode_contrast(nets, x) * w_c).sum();
  }, wanted, seed + 1));
  out.push_back(check_module("decoder", *nets.decoder, [&] { return (decode(nets, a, c) * w_x).sum(); },
                             wanted, seed + 2));
  out.push_back(check_module("critic_t", *nets.infomax_critic, [&] { return (critic_t(nets, c, x) * w_s).sum(); },
                             wanted, seed + 3));
  out.push_back(check_module("disc_u", *nets.discriminator, [&] {
    return (torch::sigmoid(discriminator_u_logits(nets, a, c)) * w_s).sum();
  }, wanted, seed + 4));
  return out;
}

}  // namespace gradcheck
