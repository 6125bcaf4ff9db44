#pragma once

// Circular Gaussian mixtures approximating the exponential and
// de Vaucouleurs surface-brightness profiles at unit effective radius.
// Each mixture has unit total flux. Coefficients come from
// tools/fit_profiles.py: an area-weighted least-squares fit on [0, 8]
// effective radii with weights constrained to sum to one.

#include <array>

namespace skycat {

struct ProfileComponent {
  double weight;
  double sd;  ///< in units of the effective radius
};

inline constexpr std::array<ProfileComponent, 3> kExponentialProfile{{
    {0.040228204381748157, 0.20830679285179518},
    {0.36147236645761444, 0.56530786293347268},
    {0.59829942916063739, 1.1954218028214645},
}};

inline constexpr std::array<ProfileComponent, 3> kDeVaucouleursProfile{{
    {0.023578847782952123, 0.023510049356442929},
    {0.1908623605623703, 0.1480841719516649},
    {0.78555879165467768, 1.0348853694236897},
}};

}  // namespace skycat
