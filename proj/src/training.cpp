#include "smd/training.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "smd/error.hpp"
#include "smd/mi.hpp"

namespace smd::training {
namespace {

using nets::AnatomyMode;

// Temporarily stops a module's parameters from accumulating gradients.
class FreezeGuard {
 public:
  explicit FreezeGuard(torch::nn::Module& m) : params_(m.parameters()) {
    for (auto& p : params_) p.requires_grad_(false);
  }
  ~FreezeGuard() {
    for (auto& p : params_) p.requires_grad_(true);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<torch::Tensor> params_;
};

double grad_norm(torch::nn::Module& m) {
  double sq = 0.0;
  for (const auto& p : m.parameters()) {
    if (p.grad().defined()) sq += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  }
  return std::sqrt(sq);
}

torch::Tensor shuffled_rows(const torch::Tensor& t) {
  const auto perm = mi::cyclic_derangement(t.size(0));
  return t.index_select(0, torch::tensor(perm, torch::kLong));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void validate(const TrainConfig& c) {
  if (!(c.lambda1 >= 0 && c.lambda2 >= 0 && c.lambda3 >= 0 && c.lambda_pair >= 0)) {
    throw ValidationError("lambda weights must be >= 0");
  }
  if (c.batch_size < 2) throw ValidationError("batch_size must be >= 2");
  if (!(c.learning_rate >= 0)) throw ValidationError("learning_rate must be >= 0");
  if (c.total_steps < 0) throw ValidationError("total_steps must be >= 0");
  if (!(c.temperature > 0)) throw ValidationError("temperature must be > 0");
  if (c.disc_steps_per_gen < 0) throw ValidationError("disc_steps_per_gen must be >= 0");
  if (!(c.paired_fraction >= 0 && c.paired_fraction <= 1)) {
    throw ValidationError("paired_fraction must lie in [0, 1]");
  }
  if (!(c.grad_clip > 0)) throw ValidationError("grad_clip must be > 0");
  if (c.checkpoint_interval < 0) throw ValidationError("checkpoint_interval must be >= 0");
  if (c.anatomy_channels < 2) throw ValidationError("anatomy_channels must be >= 2");
  if (c.network_width < 1) throw ValidationError("network_width must be >= 1");
}

KeyValueConfig to_kv(const TrainConfig& c) {
  KeyValueConfig kv;
  kv.set("lambda1", format_double(c.lambda1));
  kv.set("lambda2", format_double(c.lambda2));
  kv.set("lambda3", format_double(c.lambda3));
  kv.set("batch_size", std::to_string(c.batch_size));
  kv.set("learning_rate", format_double(c.learning_rate));
  kv.set("total_steps", std::to_string(c.total_steps));
  kv.set("temperature", format_double(c.temperature));
  kv.set("disc_steps_per_gen", std::to_string(c.disc_steps_per_gen));
  kv.set("seed", std::to_string(c.seed));
  kv.set("paired_fraction", format_double(c.paired_fraction));
  kv.set("lambda_pair", format_double(c.lambda_pair));
  kv.set("grad_clip", format_double(c.grad_clip));
  kv.set("checkpoint_interval", std::to_string(c.checkpoint_interval));
  kv.set("straight_through", c.straight_through ? "true" : "false");
  kv.set("anatomy_channels", std::to_string(c.anatomy_channels));
  kv.set("network_width", std::to_string(c.network_width));
  return kv;
}

TrainConfig train_config_from_kv(const KeyValueConfig& kv) {
  kv.reject_unknown({"lambda1", "lambda2", "lambda3", "batch_size", "learning_rate", "total_steps",
                     "temperature", "disc_steps_per_gen", "seed", "paired_fraction", "lambda_pair",
                     "grad_clip", "checkpoint_interval", "straight_through", "anatomy_channels",
                     "network_width"});
  TrainConfig c;
  c.lambda1 = kv.get_double("lambda1", c.lambda1);
  c.lambda2 = kv.get_double("lambda2", c.lambda2);
  c.lambda3 = kv.get_double("lambda3", c.lambda3);
  c.batch_size = kv.get_int("batch_size", c.batch_size);
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.total_steps = kv.get_int("total_steps", c.total_steps);
  c.temperature = kv.get_double("temperature", c.temperature);
  c.disc_steps_per_gen = kv.get_int("disc_steps_per_gen", c.disc_steps_per_gen);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(c.seed)));
  c.paired_fraction = kv.get_double("paired_fraction", c.paired_fraction);
  c.lambda_pair = kv.get_double("lambda_pair", c.lambda_pair);
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  c.checkpoint_interval = kv.get_int("checkpoint_interval", c.checkpoint_interval);
  c.straight_through = kv.get_bool("straight_through", c.straight_through);
  c.anatomy_channels = kv.get_int("anatomy_channels", c.anatomy_channels);
  c.network_width = kv.get_int("network_width", c.network_width);
  validate(c);
  return c;
}

nets::NetConfig net_config_for(const TrainConfig& cfg, std::int64_t height, std::int64_t width) {
  nets::NetConfig n;
  n.height = height;
  n.width = width;
  n.anatomy_channels = cfg.anatomy_channels;
  n.anatomy_width = cfg.network_width;
  n.decoder_width = cfg.network_width;
  n.contrast_width = cfg.network_width;
  n.critic_width = cfg.network_width;
  return n;
}

std::string log_header() {
  std::string h = "step\trecon_l1\tinfomax_bound\tdisc_loss\tgen_adv_loss\tpaired_l1";
  for (const char* g : kGroupNames) h += std::string("\tgrad_norm_") + g;
  return h + "\n";
}

std::string log_line(const StepReport& r) {
  std::string s = std::to_string(r.step) + "\t" + fmt(r.recon_l1) + "\t" + fmt(r.infomax_bound) +
                  "\t" + fmt(r.disc_loss) + "\t" + fmt(r.gen_adv_loss) + "\t" + fmt(r.paired_l1);
  for (double g : r.grad_norms) s += "\t" + fmt(g);
  return s + "\n";
}

torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& x_hat) {
  if (x.sizes() != x_hat.sizes()) throw ValidationError("reconstruction_loss: shape mismatch");
  return (x - x_hat).abs().mean();
}

double reconstruction_loss(const ImageGrid& x, const ImageGrid& x_hat) {
  require_same_shape(x, x_hat, "reconstruction_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += std::abs(static_cast<double>(x.pixels[i]) - x_hat.pixels[i]);
  }
  return acc / static_cast<double>(x.size());
}

torch::Tensor paired_consistency_loss(const torch::Tensor& a1, const torch::Tensor& a2) {
  if (a1.sizes() != a2.sizes()) throw ValidationError("paired_consistency_loss: shape mismatch");
  return (a1 - a2).abs().mean();
}

torch::Tensor discriminator_loss(const torch::Tensor& joint_logits,
                                 const torch::Tensor& shuffled_logits) {
  return mi::softplus(-joint_logits).mean() + mi::softplus(shuffled_logits).mean();
}

torch::Tensor generator_loss(const torch::Tensor& joint_logits, const torch::Tensor& shuffled_logits) {
  return mi::softplus(joint_logits).mean() + mi::softplus(-shuffled_logits).mean();
}

// ---------------------------------------------------------------------------

BatchSampler::BatchSampler(const datagen::Dataset& dataset, std::uint64_t seed)
    : dataset_(dataset), rng_(datagen::mix_seed(seed, 0xba7c4)) {
  const auto& recs = dataset.manifest.records;
  std::map<std::pair<int, std::string>, std::vector<std::size_t>> groups;
  std::map<std::pair<std::string, int>, std::vector<std::size_t>> by_view;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    groups[{recs[i].site_id, recs[i].subject_id}].push_back(i);
    by_view[{recs[i].subject_id, recs[i].view_index}].push_back(i);
  }
  for (auto& [key, idx] : groups) {
    if (idx.size() >= 2) by_site_[key.first].push_back(idx);
  }
  if (by_site_.empty()) {
    throw ValidationError("insufficient views: no subject has 2 or more views at one site");
  }
  for (const auto& [key, idx] : by_view) {
    for (std::size_t i : idx) {
      for (std::size_t j : idx) {
        if (recs[i].site_id != recs[j].site_id) pair_keys_.emplace_back(i, j);
      }
    }
  }
}

Batch BatchSampler::next(std::int64_t batch_size, bool with_pairs) {
  std::vector<ImageGrid> xs, xps;
  std::uniform_int_distribution<std::size_t> pick_site(0, by_site_.size() - 1);
  for (std::int64_t n = 0; n < batch_size; ++n) {
    auto it = std::next(by_site_.begin(), static_cast<std::ptrdiff_t>(pick_site(rng_)));
    const auto& subjects = it->second;
    const auto& idx =
        subjects[std::uniform_int_distribution<std::size_t>(0, subjects.size() - 1)(rng_)];
    const std::size_t first = std::uniform_int_distribution<std::size_t>(0, idx.size() - 1)(rng_);
    std::size_t second = std::uniform_int_distribution<std::size_t>(0, idx.size() - 2)(rng_);
    if (second >= first) ++second;
    xs.push_back(dataset_.grids[idx[first]]);
    xps.push_back(dataset_.grids[idx[second]]);
  }
  Batch b;
  b.x = nets::images_to_tensor(xs);
  b.x_prime = nets::images_to_tensor(xps);
  if (with_pairs && !pair_keys_.empty()) {
    std::vector<ImageGrid> pa, pb;
    std::uniform_int_distribution<std::size_t> pick(0, pair_keys_.size() - 1);
    for (std::int64_t n = 0; n < batch_size; ++n) {
      const auto [i, j] = pair_keys_[pick(rng_)];
      pa.push_back(dataset_.grids[i]);
      pb.push_back(dataset_.grids[j]);
    }
    b.pair_a = nets::images_to_tensor(pa);
    b.pair_b = nets::images_to_tensor(pb);
  }
  return b;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(nets::Networks networks, TrainConfig cfg) : nets_(std::move(networks)), cfg_(cfg) {
  validate(cfg_);
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    const bool adversarial = g == static_cast<std::size_t>(Group::critic_t) ||
                             g == static_cast<std::size_t>(Group::disc_u);
    torch::optim::AdamOptions opts(cfg_.learning_rate);
    opts.betas(adversarial ? std::make_tuple(0.5, 0.999) : std::make_tuple(0.9, 0.999));
    optims_.push_back(std::make_unique<torch::optim::Adam>(module(static_cast<Group>(g)).parameters(), opts));
  }
}

torch::nn::Module& Trainer::module(Group g) {
  switch (g) {
    case Group::anatomy: return *nets_.anatomy;
    case Group::contrast: return *nets_.contrast;
    case Group::decoder: return *nets_.decoder;
    case Group::critic_t: return *nets_.infomax_critic;
    case Group::disc_u: return *nets_.discriminator;
  }
  throw std::logic_error("unknown parameter group");
}

void Trainer::zero_all() {
  for (auto& o : optims_) o->zero_grad();
}

std::array<double, kNumGroups> Trainer::clip_and_norms() {
  std::array<double, kNumGroups> norms{};
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    auto params = module(static_cast<Group>(g)).parameters();
    norms[g] = grad_norm(module(static_cast<Group>(g)));
    torch::nn::utils::clip_grad_norm_(params, cfg_.grad_clip);
  }
  return norms;
}

void Trainer::step(std::initializer_list<Group> groups) {
  for (Group g : groups) optims_[static_cast<std::size_t>(g)]->step();
}

Trainer::Forward Trainer::forward(const Batch& batch) {
  Forward f;
  const auto mode = cfg_.straight_through ? AnatomyMode::straight_through : AnatomyMode::soft;
  f.a = nets::encode_anatomy(nets_, batch.x, mode, cfg_.temperature);
  f.c = nets::encode_contrast(nets_, batch.x_prime);
  f.x_hat = nets::decode(nets_, f.a, f.c);
  return f;
}

torch::Tensor Trainer::infomax_bound(const Batch& batch, const torch::Tensor& c) {
  // Matched (c_i, x_i) against shuffled (c_i, x_{l_i}).
  const auto matched = nets::critic_t(nets_, c, batch.x);
  const auto shuffled = nets::critic_t(nets_, c, shuffled_rows(batch.x));
  return mi::deep_infomax_bound(matched, shuffled);
}

std::pair<torch::Tensor, torch::Tensor> Trainer::disc_logits(const torch::Tensor& a,
                                                             const torch::Tensor& c) {
  return {nets::discriminator_u_logits(nets_, a, c),
          nets::discriminator_u_logits(nets_, a, shuffled_rows(c))};
}

double Trainer::discriminator_phase(const torch::Tensor& a, const torch::Tensor& c,
                                    StepReport& report) {
  double loss_value = 0.0;
  for (std::int64_t k = 0; k < cfg_.disc_steps_per_gen; ++k) {
    optims_[static_cast<std::size_t>(Group::disc_u)]->zero_grad();
    auto [joint, shuffled] = disc_logits(a.detach(), c.detach());
    auto loss = discriminator_loss(joint, shuffled);
    loss.backward();
    loss_value = loss.item<double>();

    torch::NoGradGuard guard;
    const auto probs = torch::sigmoid(torch::cat({joint, shuffled}));
    if (((probs < 1e-3) | (probs > 1.0 - 1e-3)).all().item<bool>()) {
      if (saturation_warnings_++ % 100 == 0) {
        std::clog << "warning: discriminator output saturated for a full batch (step "
                  << report.step << ")\n";
      }
    }
    auto& u = module(Group::disc_u);
    report.grad_norms[static_cast<std::size_t>(Group::disc_u)] = grad_norm(u);
    auto params = u.parameters();
    torch::nn::utils::clip_grad_norm_(params, cfg_.grad_clip);
    step({Group::disc_u});
  }
  return loss_value;
}

void Trainer::check_finite(const StepReport& r) {
  recent_.push_back(r);
  if (recent_.size() > 10) recent_.pop_front();
  bool ok = std::isfinite(r.recon_l1) && std::isfinite(r.infomax_bound) &&
            std::isfinite(r.disc_loss) && std::isfinite(r.gen_adv_loss) && std::isfinite(r.paired_l1);
  for (double g : r.grad_norms) ok = ok && std::isfinite(g);
  if (ok) return;
  std::string msg = "non-finite loss or gradient at step " + std::to_string(r.step) +
                    "; last step reports:\n" + log_header();
  for (const auto& s : recent_) msg += log_line(s);
  throw NumericalError(msg);
}

void Trainer::reconstruction_phase(const Batch& batch, StepReport& r) {
  zero_all();
  const auto f = forward(batch);
  const auto recon = reconstruction_loss(batch.x, f.x_hat);
  torch::Tensor total = cfg_.lambda1 * recon;
  if (batch.has_pairs()) {
    const auto mode = cfg_.straight_through ? AnatomyMode::straight_through : AnatomyMode::soft;
    const auto a1 = nets::encode_anatomy(nets_, batch.pair_a, mode, cfg_.temperature);
    const auto a2 = nets::encode_anatomy(nets_, batch.pair_b, mode, cfg_.temperature);
    const auto pair = paired_consistency_loss(a1, a2);
    total = total + cfg_.lambda_pair * pair;
    r.paired_l1 = pair.item<double>();
  }
  total.backward();
  r.recon_l1 = recon.item<double>();
  const auto norms = clip_and_norms();
  for (auto g : {Group::anatomy, Group::contrast, Group::decoder}) {
    r.grad_norms[static_cast<std::size_t>(g)] = norms[static_cast<std::size_t>(g)];
  }
  step({Group::anatomy, Group::contrast, Group::decoder});
}

void Trainer::infomax_phase(const Batch& batch, StepReport& r) {
  zero_all();
  const auto c = nets::encode_contrast(nets_, batch.x_prime);
  const auto bound = infomax_bound(batch, c);
  (-cfg_.lambda2 * bound).backward();
  r.infomax_bound = bound.item<double>();
  const auto norms = clip_and_norms();
  r.grad_norms[static_cast<std::size_t>(Group::critic_t)] =
      norms[static_cast<std::size_t>(Group::critic_t)];
  step({Group::critic_t, Group::contrast});
}

void Trainer::adversarial_phase(const Batch& batch, StepReport& r) {
  zero_all();
  const auto mode = cfg_.straight_through ? AnatomyMode::straight_through : AnatomyMode::soft;
  const auto a = nets::encode_anatomy(nets_, batch.x, mode, cfg_.temperature);
  torch::Tensor c;
  {
    torch::NoGradGuard guard;
    c = nets::encode_contrast(nets_, batch.x_prime);
  }
  r.disc_loss = discriminator_phase(a, c, r);

  zero_all();
  {
    FreezeGuard freeze(module(Group::disc_u));
    auto [joint, shuffled] = disc_logits(a, c);
    auto gen = generator_loss(joint, shuffled);
    (cfg_.lambda3 * gen).backward();
    r.gen_adv_loss = gen.item<double>();
  }
  auto& ea = module(Group::anatomy);
  const double gen_norm = grad_norm(ea);
  auto params = ea.parameters();
  torch::nn::utils::clip_grad_norm_(params, cfg_.grad_clip);
  auto& slot = r.grad_norms[static_cast<std::size_t>(Group::anatomy)];
  slot = std::hypot(slot, gen_norm);
  step({Group::anatomy});
}

StepReport Trainer::infomax_step(const Batch& batch) {
  StepReport r;
  infomax_phase(batch, r);
  zero_all();
  check_finite(r);
  return r;
}

StepReport Trainer::adversarial_independence_step(const Batch& batch) {
  StepReport r;
  adversarial_phase(batch, r);
  zero_all();
  check_finite(r);
  return r;
}

StepReport Trainer::train_step(const Batch& batch, std::int64_t step_index) {
  StepReport r;
  r.step = step_index;
  reconstruction_phase(batch, r);
  infomax_phase(batch, r);
  adversarial_phase(batch, r);
  zero_all();
  check_finite(r);
  return r;
}

std::array<double, kNumGroups> Trainer::term_gradient_norms(LossTerm term, const Batch& batch) {
  zero_all();
  const auto mode = cfg_.straight_through ? AnatomyMode::straight_through : AnatomyMode::soft;
  switch (term) {
    case LossTerm::reconstruction: {
      const auto f = forward(batch);
      reconstruction_loss(batch.x, f.x_hat).backward();
      break;
    }
    case LossTerm::infomax: {
      const auto c = nets::encode_contrast(nets_, batch.x_prime);
      (-infomax_bound(batch, c)).backward();
      break;
    }
    case LossTerm::discriminator: {
      torch::NoGradGuard guard;
      const auto a = nets::encode_anatomy(nets_, batch.x, mode, cfg_.temperature);
      const auto c = nets::encode_contrast(nets_, batch.x_prime);
      torch::AutoGradMode enable(true);
      auto [joint, shuffled] = disc_logits(a, c);
      discriminator_loss(joint, shuffled).backward();
      break;
    }
    case LossTerm::generator: {
      const auto a = nets::encode_anatomy(nets_, batch.x, mode, cfg_.temperature);
      torch::Tensor c;
      {
        torch::NoGradGuard guard;
        c = nets::encode_contrast(nets_, batch.x_prime);
      }
      FreezeGuard freeze(module(Group::disc_u));
      auto [joint, shuffled] = disc_logits(a, c);
      generator_loss(joint, shuffled).backward();
      break;
    }
  }
  std::array<double, kNumGroups> norms{};
  for (std::size_t g = 0; g < kNumGroups; ++g) norms[g] = grad_norm(module(static_cast<Group>(g)));
  zero_all();
  return norms;
}

TrainResult train(const TrainConfig& cfg, const datagen::Dataset& dataset, const TrainHooks& hooks) {
  validate(cfg);
  if (dataset.grids.empty()) throw ValidationError("training dataset is empty");
  const auto h = dataset.grids.front().height;
  const auto w = dataset.grids.front().width;
  for (const auto& g : dataset.grids) {
    if (g.height != h || g.width != w) throw ValidationError("training images differ in size");
  }

  auto networks = nets::Networks::create(net_config_for(cfg, h, w), cfg.seed);
  Trainer trainer(std::move(networks), cfg);
  BatchSampler sampler(dataset, cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  TrainResult result{trainer.networks(), {}};
  result.log.reserve(static_cast<std::size_t>(cfg.total_steps));
  for (std::int64_t s = 0; s < cfg.total_steps; ++s) {
    const bool paired = cfg.paired_fraction > 0.0 && unit(sampler.rng()) < cfg.paired_fraction;
    const Batch batch = sampler.next(cfg.batch_size, paired);
    auto report = trainer.train_step(batch, s);
    result.log.push_back(report);
    if (hooks.on_step) hooks.on_step(report);
    if (cfg.checkpoint_interval > 0 && (s + 1) % cfg.checkpoint_interval == 0 && hooks.on_checkpoint) {
      hooks.on_checkpoint(s + 1, trainer.networks());
    }
  }
  result.networks = trainer.networks();
  return result;
}

}  // namespace smd::training
