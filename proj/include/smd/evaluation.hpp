#pragma once

#include <torch/torch.h>

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "smd/datagen.hpp"
#include "smd/mi.hpp"
#include "smd/nets.hpp"
#include "smd/translate.hpp"

// Post-training measurements on a frozen checkpoint.
namespace smd::evaluation {

// Hard-anatomy channel fractions [N, M] and contrast codes [N, 2], one row per image.
struct Codes {
  torch::Tensor anatomy_summary;
  torch::Tensor contrast;
};
Codes encode_all(const nets::Networks& nets, const std::vector<ImageGrid>& images);

// Mean absolute error and per-image quality of D(E_A(x), E_C(x')) where x' is
// another view of the same subject at the same site.
struct ReconstructionResult {
  double l1 = 0.0;
  translate::QualityReport quality;
};
ReconstructionResult evaluate_reconstruction(const nets::Networks& nets, const datagen::Dataset& data,
                                             nets::AnatomyMode mode, double temperature = 0.5);

// Held-out accuracy of a freshly trained MLP separating joint (a, c) rows
// from rows with c drawn through a derangement. Rows are split in half.
double probe_accuracy(const torch::Tensor& a_summary, const torch::Tensor& c, std::uint64_t seed,
                      int steps = 1500);

enum class ReferenceMode { single_image, site_mean };
std::string to_string(ReferenceMode m);
ReferenceMode reference_mode_from_string(const std::string& s);

// Translation over every (subject, view) rendered at two or more sites.
struct HarmonizationResult {
  std::size_t pairs = 0;
  // (source site, target site) -> (mean SSIM before, mean SSIM after)
  std::map<std::pair<int, int>, std::pair<double, double>> per_site_pair;
  translate::QualityReport before;
  translate::QualityReport after;
  double anatomy_agreement = 0.0;
  double site_accuracy = 0.0;  // NaN when no classifier was supplied
};
HarmonizationResult evaluate_harmonization(const nets::Networks& nets, const datagen::Dataset& data,
                                           ReferenceMode mode,
                                           const translate::SiteClassifier* classifier);

// Records of `data` with a second record for the same (subject, view) at a
// different site: (source index, ground-truth index).
std::vector<std::pair<std::size_t, std::size_t>> cross_site_pairs(const datagen::Dataset& data);

std::vector<int> site_labels(const datagen::Dataset& data);

struct EvaluationOptions {
  mi::RatioOptions ratio;
  ReferenceMode reference = ReferenceMode::single_image;
  std::uint64_t seed = 0;
};
EvaluationOptions default_evaluation_options(std::uint64_t seed);

// Full report as `key = value` lines.
std::string evaluate_report(const nets::Networks& nets, const datagen::Dataset& data,
                            const EvaluationOptions& opts);

}  // namespace smd::evaluation
