#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <string>

#include "retrograph/elements.hpp"
#include "retrograph/error.hpp"
#include "retrograph/molgraph.hpp"

namespace retrograph {
namespace {

struct PendingBond {
  double order = 0.0;  // 0: not specified
  std::size_t offset = 0;
};

struct RingOpen {
  int atom;
  PendingBond bond;
  std::size_t offset;
};

struct RawBond {
  int u, v;
  double order;
  bool implicit_aromatic;
};

class Parser {
 public:
  Parser(std::string_view text, std::vector<ParseWarning>* warnings)
      : s_(text), warnings_(warnings) {}

  MolGraph run() {
    while (i_ < s_.size()) {
      const char c = s_[i_];
      if (c == '(') {
        if (prev_ < 0) throw SyntaxError("branch without preceding atom", i_);
        if (bond_.order != 0.0) throw SyntaxError("bond before branch", i_);
        branches_.push_back({prev_, i_});
        ++i_;
      } else if (c == ')') {
        if (branches_.empty()) throw SyntaxError("unmatched ')'", i_);
        if (bond_.order != 0.0) throw SyntaxError("dangling bond", i_);
        prev_ = branches_.back().first;
        branches_.pop_back();
        ++i_;
      } else if (c == '.') {
        if (bond_.order != 0.0) throw SyntaxError("dangling bond", i_);
        if (!branches_.empty()) throw SyntaxError("'.' inside branch", i_);
        prev_ = -1;
        ++i_;
      } else if (c == '-' || c == '=' || c == '#' || c == ':' || c == '/' || c == '\\' ||
                 c == '$') {
        parse_bond();
      } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '%') {
        parse_ring();
      } else if (c == '[') {
        parse_bracket_atom();
      } else {
        parse_organic_atom();
      }
    }
    if (bond_.order != 0.0) throw SyntaxError("dangling bond", bond_.offset);
    if (!branches_.empty()) throw SyntaxError("unclosed branch", branches_.back().second);
    if (!rings_.empty()) {
      throw SyntaxError("unclosed ring " + std::to_string(rings_.begin()->first),
                        rings_.begin()->second.offset);
    }
    return finish();
  }

 private:
  void warn(const std::string& message) {
    if (warnings_) warnings_->push_back({i_, message});
  }

  void parse_bond() {
    const std::size_t at = i_;
    const char c = s_[i_++];
    if (bond_.order != 0.0) throw SyntaxError("two consecutive bonds", at);
    switch (c) {
      case '-': bond_ = {1.0, at}; break;
      case '=': bond_ = {2.0, at}; break;
      case '#': bond_ = {3.0, at}; break;
      case ':': bond_ = {kAromaticOrder, at}; break;
      case '/':
      case '\\':
        if (warnings_) warnings_->push_back({at, "directional bond ignored"});
        bond_ = {1.0, at};
        break;
      default:
        throw SyntaxError("unsupported bond '" + std::string(1, c) + "'", at);
    }
  }

  void parse_ring() {
    const std::size_t at = i_;
    int number = 0;
    if (s_[i_] == '%') {
      if (i_ + 2 >= s_.size() || !std::isdigit(static_cast<unsigned char>(s_[i_ + 1])) ||
          !std::isdigit(static_cast<unsigned char>(s_[i_ + 2]))) {
        throw SyntaxError("malformed %nn ring label", at);
      }
      number = (s_[i_ + 1] - '0') * 10 + (s_[i_ + 2] - '0');
      i_ += 3;
    } else {
      number = s_[i_] - '0';
      ++i_;
    }
    if (prev_ < 0) throw SyntaxError("ring label without atom", at);
    auto it = rings_.find(number);
    if (it == rings_.end()) {
      rings_[number] = {prev_, bond_, at};
      bond_ = {};
      return;
    }
    const RingOpen open = it->second;
    rings_.erase(it);
    if (open.atom == prev_) throw SyntaxError("ring closure to same atom", at);
    double order = open.bond.order;
    if (bond_.order != 0.0) {
      if (order != 0.0 && order != bond_.order) throw SyntaxError("conflicting ring bonds", at);
      order = bond_.order;
    }
    bond_ = {};
    add_bond(open.atom, prev_, order, at);
  }

  void add_bond(int u, int v, double order, std::size_t at) {
    for (const auto& b : bonds_) {
      if ((b.u == u && b.v == v) || (b.u == v && b.v == u)) throw SyntaxError("duplicate bond", at);
    }
    bool implicit_aromatic = false;
    if (order == 0.0) {
      if (atoms_[u].aromatic && atoms_[v].aromatic) {
        order = kAromaticOrder;
        implicit_aromatic = true;
      } else {
        order = 1.0;
      }
    }
    bonds_.push_back({u, v, order, implicit_aromatic});
  }

  void attach(AtomRecord atom, bool bracket, std::size_t at) {
    if (atom.atom_map > 0) {
      if (!maps_.insert(atom.atom_map).second) {
        throw SyntaxError("duplicate atom map " + std::to_string(atom.atom_map), at);
      }
    }
    atoms_.push_back(atom);
    bracket_.push_back(bracket);
    offsets_.push_back(at);
    const int idx = static_cast<int>(atoms_.size()) - 1;
    if (prev_ >= 0) {
      add_bond(prev_, idx, bond_.order, at);
    } else if (bond_.order != 0.0) {
      throw SyntaxError("bond without preceding atom", bond_.offset);
    }
    bond_ = {};
    prev_ = idx;
  }

  void parse_organic_atom() {
    const std::size_t at = i_;
    AtomRecord a;
    const char c = s_[i_];
    auto two = [&](const char* sym) { return s_.substr(i_, 2) == sym; };
    if (c == '*') {
      a.atomic_number = kWildcard;
      i_ += 1;
    } else if (two("Cl")) {
      a.atomic_number = 17;
      i_ += 2;
    } else if (two("Br")) {
      a.atomic_number = 35;
      i_ += 2;
    } else {
      std::optional<int> z;
      switch (c) {
        case 'B': z = 5; break;
        case 'C': z = 6; break;
        case 'N': z = 7; break;
        case 'O': z = 8; break;
        case 'P': z = 15; break;
        case 'S': z = 16; break;
        case 'F': z = 9; break;
        case 'I': z = 53; break;
        case 'b': z = 5; a.aromatic = true; break;
        case 'c': z = 6; a.aromatic = true; break;
        case 'n': z = 7; a.aromatic = true; break;
        case 'o': z = 8; a.aromatic = true; break;
        case 'p': z = 15; a.aromatic = true; break;
        case 's': z = 16; a.aromatic = true; break;
        default: break;
      }
      if (!z) throw SyntaxError("unknown token '" + std::string(1, c) + "'", at);
      a.atomic_number = *z;
      i_ += 1;
    }
    attach(a, false, at);
  }

  int read_int() {
    int value = 0;
    bool any = false;
    while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_]))) {
      value = value * 10 + (s_[i_] - '0');
      ++i_;
      any = true;
    }
    return any ? value : -1;
  }

  void parse_bracket_atom() {
    const std::size_t at = i_;
    ++i_;
    AtomRecord a;
    const int iso = read_int();
    if (iso > 0) a.isotope = iso;
    if (i_ >= s_.size()) throw SyntaxError("unterminated bracket atom", at);
    // Element symbol.
    if (s_[i_] == '*') {
      a.atomic_number = kWildcard;
      ++i_;
    } else if (std::islower(static_cast<unsigned char>(s_[i_]))) {
      static const std::map<std::string, int> aromatic = {
          {"se", 34}, {"as", 33}, {"te", 52}, {"c", 6}, {"n", 7},
          {"o", 8},   {"p", 15},  {"s", 16},  {"b", 5}};
      bool found = false;
      for (std::size_t len : {2u, 1u}) {
        auto it = aromatic.find(std::string(s_.substr(i_, len)));
        if (it != aromatic.end()) {
          a.atomic_number = it->second;
          a.aromatic = true;
          i_ += len;
          found = true;
          break;
        }
      }
      if (!found) throw SyntaxError("unknown aromatic symbol", i_);
    } else if (std::isupper(static_cast<unsigned char>(s_[i_]))) {
      std::optional<int> z;
      if (i_ + 1 < s_.size() && std::islower(static_cast<unsigned char>(s_[i_ + 1]))) {
        z = element_from_symbol(s_.substr(i_, 2));
        if (z) i_ += 2;
      }
      if (!z) {
        z = element_from_symbol(s_.substr(i_, 1));
        if (!z) throw SyntaxError("unknown element", i_);
        i_ += 1;
      }
      a.atomic_number = *z;
    } else {
      throw SyntaxError("expected element symbol", i_);
    }
    // Chirality.
    if (i_ < s_.size() && s_[i_] == '@') {
      warn("chirality ignored");
      while (i_ < s_.size() && s_[i_] == '@') ++i_;
      while (i_ < s_.size() && std::isupper(static_cast<unsigned char>(s_[i_])) && s_[i_] != 'H') ++i_;
      read_int();
    }
    // Hydrogens.
    if (i_ < s_.size() && s_[i_] == 'H') {
      ++i_;
      const int h = read_int();
      a.explicit_h = h < 0 ? 1 : h;
    }
    // Charge.
    if (i_ < s_.size() && (s_[i_] == '+' || s_[i_] == '-')) {
      const char sign = s_[i_];
      int magnitude = 0;
      while (i_ < s_.size() && s_[i_] == sign) {
        ++magnitude;
        ++i_;
      }
      const int n = read_int();
      if (n >= 0) {
        if (magnitude > 1) throw SyntaxError("malformed charge", i_);
        magnitude = n;
      }
      a.formal_charge = sign == '+' ? magnitude : -magnitude;
    }
    // Atom map.
    if (i_ < s_.size() && s_[i_] == ':') {
      ++i_;
      const int m = read_int();
      if (m < 0) throw SyntaxError("malformed atom map", i_);
      a.atom_map = m;
    }
    if (i_ >= s_.size() || s_[i_] != ']') throw SyntaxError("unterminated bracket atom", at);
    ++i_;
    attach(a, true, at);
  }

  MolGraph finish() {
    // Implicit aromatic bonds outside rings are single bonds (e.g. biaryls).
    {
      std::vector<Bond> plain;
      for (const auto& b : bonds_) plain.push_back({b.u, b.v, b.order});
      const MolGraph probe(atoms_, plain);
      for (auto& b : bonds_) {
        if (b.implicit_aromatic && !probe.bond_in_ring(b.u, b.v)) b.order = 1.0;
      }
    }
    std::vector<Bond> bonds;
    for (const auto& b : bonds_) bonds.push_back({b.u, b.v, b.order});
    MolGraph skeleton(atoms_, bonds);
    for (int v = 0; v < skeleton.size(); ++v) {
      auto& a = atoms_[v];
      const int bond_valence = skeleton.valence_from_bonds(v);
      const int arom = skeleton.aromatic_bond_count(v);
      if (!bracket_[v]) {
        const int h = implicit_hydrogens(a.atomic_number, a.aromatic, bond_valence, arom);
        if (h < 0) throw ValenceError("no allowed valence fits", offsets_[v]);
        a.implicit_h = h;
      }
      if (!valence_fits(a.atomic_number, a.formal_charge, a.aromatic, bond_valence, arom,
                        a.total_h())) {
        throw ValenceError("no allowed valence fits", offsets_[v]);
      }
    }
    return MolGraph(std::move(atoms_), std::move(bonds));
  }

  std::string_view s_;
  std::vector<ParseWarning>* warnings_;
  std::size_t i_ = 0;
  int prev_ = -1;
  PendingBond bond_;
  std::vector<std::pair<int, std::size_t>> branches_;
  std::map<int, RingOpen> rings_;
  std::set<int> maps_;
  std::vector<AtomRecord> atoms_;
  std::vector<bool> bracket_;
  std::vector<std::size_t> offsets_;
  std::vector<RawBond> bonds_;
};

}  // namespace

MolGraph parse_smiles(std::string_view text, std::vector<ParseWarning>* warnings) {
  if (text.empty()) return MolGraph();
  return Parser(text, warnings).run();
}

}  // namespace retrograph
