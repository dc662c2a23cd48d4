#pragma once

#include "smd/config.hpp"
#include "smd/datagen.hpp"

namespace smd::datagen {

// Dataset options from `key = value` text. Recognised keys:
//   height, width, num_classes, num_views, view_rotation_deg, min_shapes,
//   max_shapes, subjects_per_site, paired_fraction, traveling, seed,
//   num_sites, bias_amplitude, noise_sigma,
//   site.<i>.intensity (comma list), site.<i>.gamma, site.<i>.bias_amplitude,
//   site.<i>.noise_sigma
// Sites start from the standard set (truncated to num_sites, at most 4
// unless every field of the extra sites is given); site.<i>.* overrides.
DatasetOptions dataset_options_from_kv(const KeyValueConfig& kv);

}  // namespace smd::datagen
