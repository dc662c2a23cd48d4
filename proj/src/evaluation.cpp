#include "smd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "smd/config.hpp"
#include "smd/error.hpp"
#include "smd/image_metrics.hpp"

namespace smd::evaluation {
namespace {

constexpr std::size_t kChunk = 64;

torch::Tensor batch_of(const nets::Networks& nets, const std::vector<ImageGrid>& grids,
                       const std::vector<std::size_t>& idx) {
  std::vector<ImageGrid> imgs;
  imgs.reserve(idx.size());
  for (auto i : idx) imgs.push_back(grids[i]);
  return nets::images_to_tensor(imgs).to(nets.decoder->parameters().front().scalar_type());
}

torch::Tensor rows(const torch::Tensor& t, const std::vector<std::int64_t>& idx) {
  return t.index_select(0, torch::tensor(idx, torch::kLong));
}

std::string fmt(double v) { return format_double(v); }

}  // namespace

Codes encode_all(const nets::Networks& nets, const std::vector<ImageGrid>& images) {
  if (images.empty()) throw ValidationError("encode_all: no images");
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> as, cs;
  std::vector<std::size_t> all(images.size());
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t lo = 0; lo < images.size(); lo += kChunk) {
    const std::vector<std::size_t> idx(all.begin() + static_cast<std::ptrdiff_t>(lo),
                                       all.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), lo + kChunk)));
    const auto x = batch_of(nets, images, idx);
    as.push_back(nets::anatomy_summary(nets::encode_anatomy(nets, x, nets::AnatomyMode::hard, 0.5)));
    cs.push_back(nets::encode_contrast(nets, x));
  }
  return {torch::cat(as).to(torch::kFloat64), torch::cat(cs).to(torch::kFloat64)};
}

ReconstructionResult evaluate_reconstruction(const nets::Networks& nets, const datagen::Dataset& data,
                                             nets::AnatomyMode mode, double temperature) {
  const auto& recs = data.manifest.records;
  if (recs.empty()) throw ValidationError("evaluate_reconstruction: empty dataset");
  // Partner view: the next record of the same subject at the same site.
  std::map<std::pair<std::string, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < recs.size(); ++i) groups[{recs[i].subject_id, recs[i].site_id}].push_back(i);
  std::vector<std::size_t> partner(recs.size());
  for (const auto& [key, idx] : groups) {
    for (std::size_t k = 0; k < idx.size(); ++k) partner[idx[k]] = idx[(k + 1) % idx.size()];
  }

  torch::NoGradGuard guard;
  std::vector<ImageGrid> outputs;
  std::vector<std::string> ids;
  for (std::size_t lo = 0; lo < recs.size(); lo += kChunk) {
    std::vector<std::size_t> idx, pidx;
    for (std::size_t i = lo; i < std::min(recs.size(), lo + kChunk); ++i) {
      idx.push_back(i);
      pidx.push_back(partner[i]);
      ids.push_back(recs[i].sample_id);
    }
    const auto a = nets::encode_anatomy(nets, batch_of(nets, data.grids, idx), mode, temperature);
    const auto c = nets::encode_contrast(nets, batch_of(nets, data.grids, pidx));
    for (auto& img : nets::tensor_to_images(nets::decode(nets, a, c))) outputs.push_back(std::move(img));
  }
  ReconstructionResult r;
  for (std::size_t i = 0; i < recs.size(); ++i) r.l1 += translate::mean_absolute_error(outputs[i], data.grids[i]);
  r.l1 /= static_cast<double>(recs.size());
  r.quality = translate::quality_report(outputs, data.grids, ids);
  return r;
}

double probe_accuracy(const torch::Tensor& a_summary, const torch::Tensor& c, std::uint64_t seed, int steps) {
  const auto n = a_summary.size(0);
  if (n < 8 || c.size(0) != n) throw ValidationError("probe_accuracy: need at least 8 paired rows");
  auto joint = torch::cat({a_summary, c}, 1).to(torch::kFloat64);
  joint = (joint - joint.mean(0)) / joint.std(0).clamp_min(1e-9);
  const auto da = a_summary.size(1);

  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(datagen::mix_seed(seed, 0x9b0be));
  std::shuffle(order.begin(), order.end(), rng);
  const auto half = n / 2;
  const std::vector<std::int64_t> train_idx(order.begin(), order.begin() + half);
  const std::vector<std::int64_t> test_idx(order.begin() + half, order.end());

  // Joint rows labelled 1, rows with c permuted by a derangement labelled 0.
  const auto make = [&](const std::vector<std::int64_t>& idx, std::uint64_t s) {
    const auto j = rows(joint, idx);
    const auto perm = mi::random_derangement(static_cast<std::int64_t>(idx.size()), s);
    const auto shuffled = torch::cat({j.slice(1, 0, da), rows(j.slice(1, da), perm)}, 1);
    const auto x = torch::cat({j, shuffled}, 0);
    const auto y = torch::cat({torch::ones({j.size(0)}, torch::kFloat64), torch::zeros({j.size(0)}, torch::kFloat64)});
    return std::make_pair(x, y);
  };
  const auto [xtr, ytr] = make(train_idx, datagen::mix_seed(seed, 1));
  const auto [xte, yte] = make(test_idx, datagen::mix_seed(seed, 2));

  mi::StatisticsNetwork probe(joint.size(1), 64, datagen::mix_seed(seed, 3));
  probe->to(torch::kFloat64);
  torch::optim::Adam optim(probe->parameters(), torch::optim::AdamOptions(1e-3));
  for (int s = 0; s < steps; ++s) {
    optim.zero_grad();
    torch::nn::functional::binary_cross_entropy_with_logits(probe->forward(xtr), ytr).backward();
    optim.step();
  }
  torch::NoGradGuard guard;
  const auto pred = (probe->forward(xte) > 0).to(torch::kFloat64);
  return pred.eq(yte).to(torch::kFloat64).mean().item<double>();
}

std::string to_string(ReferenceMode m) {
  return m == ReferenceMode::single_image ? "single_image" : "site_mean";
}

ReferenceMode reference_mode_from_string(const std::string& s) {
  if (s == "single_image") return ReferenceMode::single_image;
  if (s == "site_mean") return ReferenceMode::site_mean;
  throw ValidationError("reference_mode must be single_image or site_mean, got '" + s + "'");
}

std::vector<std::pair<std::size_t, std::size_t>> cross_site_pairs(const datagen::Dataset& data) {
  const auto& recs = data.manifest.records;
  std::map<std::pair<std::string, int>, std::vector<std::size_t>> by_view;
  for (std::size_t i = 0; i < recs.size(); ++i) by_view[{recs[i].subject_id, recs[i].view_index}].push_back(i);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& [key, idx] : by_view) {
    for (auto i : idx) {
      for (auto j : idx) {
        if (recs[i].site_id != recs[j].site_id) out.emplace_back(i, j);
      }
    }
  }
  return out;
}

std::vector<int> site_labels(const datagen::Dataset& data) {
  std::vector<int> s;
  for (const auto& r : data.manifest.records) s.push_back(r.site_id);
  return s;
}

HarmonizationResult evaluate_harmonization(const nets::Networks& nets, const datagen::Dataset& data,
                                           ReferenceMode mode,
                                           const translate::SiteClassifier* classifier) {
  const auto& recs = data.manifest.records;
  const auto pairs = cross_site_pairs(data);
  HarmonizationResult r;
  r.pairs = pairs.size();
  r.site_accuracy = std::numeric_limits<double>::quiet_NaN();
  if (pairs.empty()) return r;

  // Reference for target site t: another subject's render at t (same view
  // when available), or the mean code over every render at t.
  std::map<int, std::vector<std::size_t>> at_site;
  for (std::size_t i = 0; i < recs.size(); ++i) at_site[recs[i].site_id].push_back(i);
  std::map<int, translate::ContrastCode> site_mean;
  if (mode == ReferenceMode::site_mean) {
    for (const auto& [site, idx] : at_site) {
      std::vector<ImageGrid> imgs;
      for (auto i : idx) imgs.push_back(data.grids[i]);
      site_mean[site] = translate::mean_contrast_code(nets, imgs);
    }
  }
  const auto reference_for = [&](std::size_t src, int target) -> std::size_t {
    const auto& cands = at_site.at(target);
    std::size_t fallback = cands.front();
    bool have_fallback = false;
    for (auto k : cands) {
      if (recs[k].subject_id == recs[src].subject_id) continue;
      if (recs[k].view_index == recs[src].view_index) return k;
      if (!have_fallback) fallback = k, have_fallback = true;
    }
    return fallback;
  };

  std::vector<ImageGrid> sources, truths, outputs;
  std::vector<int> targets;
  std::vector<std::string> ids;
  for (const auto& [i, j] : pairs) {
    const int t = recs[j].site_id;
    translate::TranslationJob job;
    job.source_images = {data.grids[i]};
    job.hard_anatomy = true;
    if (mode == ReferenceMode::site_mean) {
      job.target = site_mean.at(t);
    } else {
      job.target = data.grids[reference_for(i, t)];
    }
    outputs.push_back(translate::harmonize(nets, job).front());
    sources.push_back(data.grids[i]);
    truths.push_back(data.grids[j]);
    targets.push_back(t);
    ids.push_back(recs[i].sample_id + "->" + std::to_string(t));
  }
  r.before = translate::quality_report(sources, truths, ids);
  r.after = translate::quality_report(outputs, truths, ids);

  std::map<std::pair<int, int>, std::pair<double, double>> sums;
  std::map<std::pair<int, int>, int> counts;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const std::pair<int, int> key{recs[pairs[k].first].site_id, targets[k]};
    sums[key].first += r.before.ssim[k];
    sums[key].second += r.after.ssim[k];
    ++counts[key];
  }
  for (const auto& [key, s] : sums) {
    r.per_site_pair[key] = {s.first / counts[key], s.second / counts[key]};
  }
  r.anatomy_agreement = translate::label_agreement(nets, sources, outputs);
  if (classifier != nullptr) r.site_accuracy = classifier->accuracy(outputs, targets);
  return r;
}

EvaluationOptions default_evaluation_options(std::uint64_t seed) {
  EvaluationOptions o;
  o.seed = seed;
  o.ratio.standardize_c = true;
  o.ratio.holdout_fraction = 0.5;
  o.ratio.mine.seed = seed;
  return o;
}

std::string evaluate_report(const nets::Networks& nets, const datagen::Dataset& data,
                            const EvaluationOptions& opts) {
  std::ostringstream out;
  out << "metric_dimensionality = 2d_per_image\n";
  out << "n_images = " << data.grids.size() << "\n";

  const auto soft = evaluate_reconstruction(nets, data, nets::AnatomyMode::soft);
  const auto hard = evaluate_reconstruction(nets, data, nets::AnatomyMode::hard);
  out << "recon_l1 = " << fmt(soft.l1) << "\n";
  out << "recon_ssim_mean = " << fmt(soft.quality.ssim_summary.mean) << "\n";
  out << "recon_ssim_std = " << fmt(soft.quality.ssim_summary.stddev) << "\n";
  out << "recon_psnr_mean = " << fmt(soft.quality.psnr_summary.mean) << "\n";
  out << "recon_psnr_std = " << fmt(soft.quality.psnr_summary.stddev) << "\n";
  out << "recon_hard_l1 = " << fmt(hard.l1) << "\n";
  out << "recon_hard_ssim_mean = " << fmt(hard.quality.ssim_summary.mean) << "\n";

  translate::SiteClassifier classifier;
  std::set<int> sites;
  for (const auto& rec : data.manifest.records) sites.insert(rec.site_id);
  const bool can_classify = sites.size() >= 2;
  if (can_classify) classifier.fit(data.grids, site_labels(data));
  const auto h = evaluate_harmonization(nets, data, opts.reference, can_classify ? &classifier : nullptr);
  out << "translation_reference = " << to_string(opts.reference) << "\n";
  out << "translation_pairs = " << h.pairs << "\n";
  if (h.pairs > 0) {
    out << "translation_ssim_before_mean = " << fmt(h.before.ssim_summary.mean) << "\n";
    out << "translation_ssim_after_mean = " << fmt(h.after.ssim_summary.mean) << "\n";
    out << "translation_ssim_after_std = " << fmt(h.after.ssim_summary.stddev) << "\n";
    out << "translation_psnr_before_mean = " << fmt(h.before.psnr_summary.mean) << "\n";
    out << "translation_psnr_after_mean = " << fmt(h.after.psnr_summary.mean) << "\n";
    out << "translation_psnr_after_std = " << fmt(h.after.psnr_summary.stddev) << "\n";
    out << "anatomy_agreement = " << fmt(h.anatomy_agreement) << "\n";
    if (can_classify) out << "site_accuracy = " << fmt(h.site_accuracy) << "\n";
    for (const auto& [key, v] : h.per_site_pair) {
      const auto pair = std::to_string(key.first) + "_to_" + std::to_string(key.second);
      out << "translation_ssim_before." << pair << " = " << fmt(v.first) << "\n";
      out << "translation_ssim_after." << pair << " = " << fmt(v.second) << "\n";
    }
  }

  const auto codes = encode_all(nets, data.grids);
  const auto n = static_cast<std::int64_t>(data.grids.size());
  if (n >= 8) out << "probe_accuracy = " << fmt(probe_accuracy(codes.anatomy_summary, codes.contrast, opts.seed)) << "\n";
  if (n < mi::kMinEntropySamples) {
    out << "ri_status = insufficient_samples\n";
  } else {
    try {
      const auto ri = mi::ratio_RI(codes.anatomy_summary, codes.contrast, opts.ratio);
      out << "ri_status = ok\n" << mi::format_report_kv(ri);
      out << "ri_holdout_fraction = " << fmt(opts.ratio.holdout_fraction) << "\n";
      out << "ri_standardize_c = " << (opts.ratio.standardize_c ? "true" : "false") << "\n";
    } catch (const NumericalError&) {
      out << "ri_status = degenerate_contrast\n";
    }
  }
  return out.str();
}

}  // namespace smd::evaluation
