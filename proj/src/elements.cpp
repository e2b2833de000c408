#include "retrograph/elements.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>
#include <vector>

namespace retrograph {
namespace {

constexpr std::array<std::string_view, 87> kSymbols = {
    "*",  "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si",
    "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu",
    "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru",
    "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr",
    "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",
    "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn"};

constexpr std::array<int, 1> kOne = {1};
constexpr std::array<int, 1> kTwo = {2};
constexpr std::array<int, 1> kThree = {3};
constexpr std::array<int, 1> kFour = {4};
constexpr std::array<int, 2> kThreeFive = {3, 5};
constexpr std::array<int, 3> kTwoFourSix = {2, 4, 6};

bool electron_rich(int z) {
  switch (z) {
    case 7: case 8: case 15: case 16: case 34:
    case 9: case 17: case 35: case 53:
      return true;
    default:
      return false;
  }
}

}  // namespace

std::optional<int> element_from_symbol(std::string_view symbol) {
  for (std::size_t z = 0; z < kSymbols.size(); ++z) {
    if (kSymbols[z] == symbol) return static_cast<int>(z);
  }
  return std::nullopt;
}

std::string_view element_symbol(int atomic_number) {
  if (atomic_number < 0 || atomic_number >= static_cast<int>(kSymbols.size())) return "?";
  return kSymbols[static_cast<std::size_t>(atomic_number)];
}

bool in_organic_subset(int z) {
  switch (z) {
    case 5: case 6: case 7: case 8: case 15: case 16: case 9: case 17: case 35: case 53:
      return true;
    default:
      return false;
  }
}

bool may_be_aromatic(int z) {
  switch (z) {
    case 5: case 6: case 7: case 8: case 15: case 16: case 33: case 34: case 52:
      return true;
    default:
      return false;
  }
}

std::span<const int> base_valences(int z) {
  switch (z) {
    case 1: case 9: case 17: case 35: case 53: return kOne;
    case 8: return kTwo;
    case 5: return kThree;
    case 6: case 14: return kFour;
    case 7: case 15: return kThreeFive;
    case 16: case 34: return kTwoFourSix;
    default: return {};
  }
}

std::vector<int> allowed_valences(int z, int charge) {
  const auto base = base_valences(z);
  std::vector<int> out;
  for (int v : base) {
    int shifted = v;
    if (electron_rich(z)) {
      shifted = v + charge;
    } else if (z == 5) {
      shifted = v - charge;
    } else {
      shifted = v - std::abs(charge);
    }
    if (shifted >= 0) out.push_back(shifted);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  // A shifted table that empties out (e.g. F+2) means "no valence fits".
  if (out.empty() && !base.empty()) out.push_back(-1);
  return out;
}

}  // namespace retrograph
