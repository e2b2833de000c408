#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace retrograph {

/// Atomic number 0 is reserved for the "*" wildcard.
inline constexpr int kWildcard = 0;

std::optional<int> element_from_symbol(std::string_view symbol);
std::string_view element_symbol(int atomic_number);

/// True for B, C, N, O, P, S, F, Cl, Br, I (may be written without brackets).
bool in_organic_subset(int atomic_number);
/// True for the elements that may be written as lowercase aromatic symbols.
bool may_be_aromatic(int atomic_number);

/// Allowed total valences of a neutral atom; empty means "not checked".
std::span<const int> base_valences(int atomic_number);

/// Allowed total valences after applying the formal-charge shift.
/// Electron-rich elements (N, O, P, S, halogens) gain one valence per
/// positive charge and lose one per negative charge; carbon loses one per
/// unit of either sign; boron gains one per negative charge.
std::vector<int> allowed_valences(int atomic_number, int formal_charge);

}  // namespace retrograph
