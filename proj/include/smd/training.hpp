#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "smd/config.hpp"
#include "smd/datagen.hpp"
#include "smd/nets.hpp"

namespace smd::training {

struct TrainConfig {
  double lambda1 = 1.0;  // l1 reconstruction
  double lambda2 = 0.1;  // infomax lower bound on I(c; x)
  double lambda3 = 0.1;  // adversarial I(a; c) penalty
  std::int64_t batch_size = 16;
  double learning_rate = 1e-4;
  std::int64_t total_steps = 5000;
  double temperature = 0.5;
  std::int64_t disc_steps_per_gen = 1;
  std::uint64_t seed = 0;
  double paired_fraction = 0.0;

  double lambda_pair = 0.1;
  double grad_clip = 10.0;
  std::int64_t checkpoint_interval = 0;  // 0 disables periodic checkpoints
  bool straight_through = false;         // one-hot forward in the training pathway
  std::int64_t anatomy_channels = 8;
  std::int64_t network_width = 16;
};

void validate(const TrainConfig& cfg);
KeyValueConfig to_kv(const TrainConfig& cfg);
// Rejects keys that are not TrainConfig fields.
TrainConfig train_config_from_kv(const KeyValueConfig& kv);

nets::NetConfig net_config_for(const TrainConfig& cfg, std::int64_t height, std::int64_t width);

// Parameter groups in Networks::groups() order.
enum class Group { anatomy = 0, contrast, decoder, critic_t, disc_u };
inline constexpr std::size_t kNumGroups = 5;
inline constexpr std::array<const char*, kNumGroups> kGroupNames = {"anatomy", "contrast", "decoder",
                                                                   "critic_t", "disc_u"};

struct StepReport {
  std::int64_t step = 0;
  double recon_l1 = 0.0;
  double infomax_bound = 0.0;
  double disc_loss = 0.0;
  double gen_adv_loss = 0.0;
  double paired_l1 = 0.0;
  std::array<double, kNumGroups> grad_norms{};  // before clipping
};

std::string log_header();
std::string log_line(const StepReport& r);

torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& x_hat);
double reconstruction_loss(const ImageGrid& x, const ImageGrid& x_hat);
torch::Tensor paired_consistency_loss(const torch::Tensor& a1, const torch::Tensor& a2);

// Binary cross-entropy of U on joint (label 1) and shuffled (label 0) logits,
// sum of the two batch means.
torch::Tensor discriminator_loss(const torch::Tensor& joint_logits, const torch::Tensor& shuffled_logits);
// Non-saturating generator loss: the same terms with labels swapped.
torch::Tensor generator_loss(const torch::Tensor& joint_logits, const torch::Tensor& shuffled_logits);

struct Batch {
  torch::Tensor x;        // [N, 1, H, W]
  torch::Tensor x_prime;  // other view, same subject and site
  // Same anatomy and view rendered at two sites; undefined when absent.
  torch::Tensor pair_a;
  torch::Tensor pair_b;

  [[nodiscard]] bool has_pairs() const { return pair_a.defined(); }
};

// Draws (x, x') pairs with sites chosen uniformly, then a subject at that site,
// then an ordered pair of distinct views.
class BatchSampler {
 public:
  BatchSampler(const datagen::Dataset& dataset, std::uint64_t seed);

  Batch next(std::int64_t batch_size, bool with_pairs);
  [[nodiscard]] bool has_cross_site_pairs() const { return !pair_keys_.empty(); }
  std::mt19937_64& rng() { return rng_; }

 private:
  const datagen::Dataset& dataset_;
  std::mt19937_64 rng_;
  // site -> list of record-index groups (one per subject, >= 2 views)
  std::map<int, std::vector<std::vector<std::size_t>>> by_site_;
  // (record at one site, record with same subject and view at another site)
  std::vector<std::pair<std::size_t, std::size_t>> pair_keys_;
};

enum class LossTerm { reconstruction, infomax, discriminator, generator };

class Trainer {
 public:
  Trainer(nets::Networks networks, TrainConfig cfg);

  // Ascent on the infomax bound; updates only T and E_C.
  StepReport infomax_step(const Batch& batch);
  // Discriminator phase (U only) followed by generator phase (E_A only);
  // c is detached throughout.
  StepReport adversarial_independence_step(const Batch& batch);
  // Full schedule: reconstruction (+ paired consistency) update of E_A, E_C, D;
  // then the infomax step; then the adversarial independence step.
  StepReport train_step(const Batch& batch, std::int64_t step);

  // Gradient norm each group receives from one loss term alone. Leaves
  // parameters and stored gradients untouched.
  std::array<double, kNumGroups> term_gradient_norms(LossTerm term, const Batch& batch);

  [[nodiscard]] nets::Networks& networks() { return nets_; }
  [[nodiscard]] const TrainConfig& config() const { return cfg_; }
  [[nodiscard]] std::int64_t saturation_warnings() const { return saturation_warnings_; }

 private:
  struct Forward {
    torch::Tensor a;        // anatomy code used by the training pathway
    torch::Tensor c;        // E_C(x')
    torch::Tensor x_hat;
  };
  Forward forward(const Batch& batch);
  torch::Tensor infomax_bound(const Batch& batch, const torch::Tensor& c);
  std::pair<torch::Tensor, torch::Tensor> disc_logits(const torch::Tensor& a, const torch::Tensor& c);
  void reconstruction_phase(const Batch& batch, StepReport& r);
  void infomax_phase(const Batch& batch, StepReport& r);
  void adversarial_phase(const Batch& batch, StepReport& r);
  double discriminator_phase(const torch::Tensor& a, const torch::Tensor& c, StepReport& report);
  void zero_all();
  std::array<double, kNumGroups> clip_and_norms();
  void step(std::initializer_list<Group> groups);
  torch::nn::Module& module(Group g);
  void check_finite(const StepReport& r);

  nets::Networks nets_;
  TrainConfig cfg_;
  std::vector<std::unique_ptr<torch::optim::Adam>> optims_;
  std::deque<StepReport> recent_;
  std::int64_t saturation_warnings_ = 0;
};

struct TrainHooks {
  std::function<void(const StepReport&)> on_step;
  std::function<void(std::int64_t step, const nets::Networks&)> on_checkpoint;
};

struct TrainResult {
  nets::Networks networks;
  std::vector<StepReport> log;
};

// Builds networks sized to the dataset and runs cfg.total_steps steps.
// Throws NumericalError carrying the last 10 step reports on non-finite losses.
TrainResult train(const TrainConfig& cfg, const datagen::Dataset& dataset, const TrainHooks& hooks = {});

}  // namespace smd::training
