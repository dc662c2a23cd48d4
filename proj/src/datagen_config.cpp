#include "smd/datagen_config.hpp"

#include <numbers>

#include "smd/error.hpp"

namespace smd::datagen {

DatasetOptions dataset_options_from_kv(const KeyValueConfig& kv) {
  kv.reject_unknown({"height", "width", "num_classes", "num_views", "view_rotation_deg", "min_shapes",
                     "max_shapes", "subjects_per_site", "paired_fraction", "traveling", "seed",
                     "num_sites", "bias_amplitude", "noise_sigma"},
                    {"site."});
  DatasetOptions o;
  auto& p = o.phantom;
  p.height = static_cast<int>(kv.get_int("height", p.height));
  p.width = static_cast<int>(kv.get_int("width", p.width));
  p.num_classes = static_cast<int>(kv.get_int("num_classes", p.num_classes));
  p.num_views = static_cast<int>(kv.get_int("num_views", p.num_views));
  p.view_rotation_rad = kv.get_double("view_rotation_deg", 90.0) * std::numbers::pi / 180.0;
  p.min_shapes = static_cast<int>(kv.get_int("min_shapes", p.min_shapes));
  p.max_shapes = static_cast<int>(kv.get_int("max_shapes", p.max_shapes));
  o.subjects_per_site = static_cast<int>(kv.get_int("subjects_per_site", o.subjects_per_site));
  o.paired_fraction = kv.get_double("paired_fraction", o.paired_fraction);
  o.traveling = kv.get_bool("traveling", o.traveling);
  o.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));

  const double bias = kv.get_double("bias_amplitude", 0.1);
  const double noise = kv.get_double("noise_sigma", 0.01);
  const auto num_sites = kv.get_int("num_sites", 4);
  if (num_sites < 1) throw ValidationError("num_sites must be >= 1");
  auto standard = standard_sites(bias, noise);
  o.sites.clear();
  for (std::int64_t i = 0; i < num_sites; ++i) {
    SiteParams s;
    if (i < static_cast<std::int64_t>(standard.size())) {
      s = standard[static_cast<std::size_t>(i)];
    } else {
      s.site_id = static_cast<int>(i);
      s.bias_amplitude = bias;
      s.noise_sigma = noise;
    }
    const std::string prefix = "site." + std::to_string(i) + ".";
    if (kv.has(prefix + "intensity")) s.tissue_intensity = kv.get_doubles(prefix + "intensity");
    s.gamma = kv.get_double(prefix + "gamma", s.gamma);
    s.bias_amplitude = kv.get_double(prefix + "bias_amplitude", s.bias_amplitude);
    s.noise_sigma = kv.get_double(prefix + "noise_sigma", s.noise_sigma);
    if (s.tissue_intensity.empty()) {
      throw ValidationError(prefix + "intensity is required for sites beyond the standard four");
    }
    o.sites.push_back(std::move(s));
  }
  for (const auto& [key, value] : kv.entries()) {
    if (key.rfind("site.", 0) != 0) continue;
    const auto dot = key.find('.', 5);
    const std::string idx = key.substr(5, dot == std::string::npos ? std::string::npos : dot - 5);
    const std::string field = dot == std::string::npos ? "" : key.substr(dot + 1);
    if (idx.empty() || idx.find_first_not_of("0123456789") != std::string::npos ||
        std::stoll(idx) >= num_sites) {
      throw ValidationError("unknown config key '" + key + "': site index out of range");
    }
    if (field != "intensity" && field != "gamma" && field != "bias_amplitude" && field != "noise_sigma") {
      throw ValidationError("unknown config key '" + key + "'");
    }
  }
  // Field-level validation happens here so that errors name the offending key.
  for (const auto& s : o.sites) {
    if (static_cast<int>(s.tissue_intensity.size()) != p.num_classes) {
      throw ValidationError("site." + std::to_string(s.site_id) + ".intensity has " +
                            std::to_string(s.tissue_intensity.size()) +
                            " entries but num_classes (K) is " + std::to_string(p.num_classes));
    }
    validate(s, p.num_classes);
  }
  validate_site_separation(o.sites);
  return o;
}

}  // namespace smd::datagen
