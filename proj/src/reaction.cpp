#include "retrograph/reaction.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "retrograph/error.hpp"

namespace retrograph {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out(s.substr(b, e - b));
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
  return out;
}

std::vector<std::string> split_csv(std::string_view line, std::size_t max_fields) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (out.size() + 1 < max_fields) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) break;
    out.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
  out.push_back(trim(line.substr(start)));
  return out;
}

std::vector<MolGraph> split_components(const MolGraph& g) {
  std::vector<MolGraph> out;
  for (const auto& comp : g.components()) out.push_back(g.subgraph(comp));
  return out;
}

int heavy_atoms(const MolGraph& g) {
  int n = 0;
  for (const auto& a : g.atoms()) n += a.atomic_number > 1 ? 1 : 0;
  return n;
}

std::filesystem::path manifest_path(const std::filesystem::path& corpus) {
  auto p = corpus;
  p.replace_filename(corpus.stem().string() + ".splits.csv");
  return p;
}

// Atom copy used inside leaving-group fragments: maps cleared, H explicit.
AtomRecord fragment_atom(const AtomRecord& a) {
  AtomRecord out = a;
  out.atom_map = 0;
  out.explicit_h = a.total_h();
  out.implicit_h = 0;
  return out;
}

}  // namespace

std::optional<Split> split_from_string(std::string_view s) {
  std::string t = trim(s);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "train") return Split::Train;
  if (t == "val" || t == "valid" || t == "validation") return Split::Val;
  if (t == "test") return Split::Test;
  return std::nullopt;
}

ReactionRecord parse_reaction(std::string record_id, std::optional<int> reaction_class,
                              std::string_view reaction) {
  const auto first = reaction.find('>');
  if (first == std::string_view::npos) throw FormatError("missing '>>' separator");
  const auto second = reaction.find('>', first + 1);
  if (second == std::string_view::npos) throw FormatError("missing '>>' separator");
  if (reaction.find('>', second + 1) != std::string_view::npos) {
    throw FormatError("too many '>' separators");
  }
  const auto reactant_text = reaction.substr(0, first);
  const auto product_text = reaction.substr(second + 1);
  if (trim(reactant_text).empty() || trim(product_text).empty()) {
    throw FormatError("empty reactant or product side");
  }

  ReactionRecord rec;
  rec.record_id = std::move(record_id);
  rec.reaction_class = reaction_class;
  rec.reactants = split_components(parse_smiles(reactant_text));

  const auto products = split_components(parse_smiles(product_text));
  std::size_t best = 0;
  for (std::size_t i = 1; i < products.size(); ++i) {
    if (heavy_atoms(products[i]) > heavy_atoms(products[best])) best = i;
  }
  rec.product = products[best];
  for (int v = 0; v < rec.product.size(); ++v) {
    if (rec.product.atom(v).atom_map <= 0) {
      throw MappingError("product atom " + std::to_string(v) + " has no map number");
    }
  }
  return rec;
}

std::vector<ReactionRecord> load_corpus(const std::filesystem::path& path, Split split,
                                        CorpusStats* stats) {
  CorpusStats local;
  CorpusStats& st = stats ? *stats : local;
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open corpus " + path.string());

  std::unordered_map<std::string, Split> membership;
  const auto manifest = manifest_path(path);
  const bool have_manifest = std::filesystem::exists(manifest);
  if (have_manifest) {
    std::ifstream min(manifest);
    std::string line;
    while (std::getline(min, line)) {
      if (trim(line).empty()) continue;
      const auto fields = split_csv(line, 2);
      if (fields.size() != 2) continue;
      if (const auto s = split_from_string(fields[1])) membership[fields[0]] = *s;
    }
  }

  std::vector<ReactionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_csv(line, 3);
    // Header row: third column carries no reaction arrow.
    if (line_no == 1 && (fields.size() < 3 || fields[2].find('>') == std::string::npos) &&
        fields[0] == "id") {
      continue;
    }
    ++st.rows;
    auto report = [&](const std::string& kind, const std::string& msg) {
      st.messages.push_back("line " + std::to_string(line_no) + ": " + kind + ": " + msg);
    };
    if (fields.size() != 3) {
      ++st.format_errors;
      report("FormatError", "expected 3 columns");
      continue;
    }
    const std::string& id = fields[0];
    Split row_split = Split::Train;
    if (have_manifest) {
      const auto it = membership.find(id);
      if (it == membership.end()) continue;
      row_split = it->second;
    }
    if (row_split != split) continue;

    std::optional<int> cls;
    try {
      if (!fields[1].empty()) {
        std::size_t used = 0;
        const int c = std::stoi(fields[1], &used);
        if (used != fields[1].size() || c < 1 || c > 10) throw FormatError("class out of range");
        cls = c;
      }
      out.push_back(parse_reaction(id, cls, fields[2]));
      ++st.loaded;
    } catch (const MappingError& e) {
      ++st.mapping_errors;
      report("MappingError", e.what());
    } catch (const std::exception& e) {
      ++st.format_errors;
      report("FormatError", e.what());
    }
  }
  return out;
}

namespace {

struct AtomRef {
  int reactant = -1;
  int atom = -1;
};

CanonicalLeavingGroup canonicalize_impl(const std::vector<MolGraph>& fragments,
                                        const std::vector<int>& tie_keys) {
  CanonicalLeavingGroup out;
  const std::size_t n = fragments.size();
  std::vector<SmilesOutput> written(n);
  for (std::size_t f = 0; f < n; ++f) {
    const auto& g = fragments[f];
    bool has_gate = false;
    for (const auto& a : g.atoms()) has_gate = has_gate || a.is_wildcard();
    if (!has_gate) throw GateError("leaving-group fragment has no gate atom");
    written[f] = write_smiles_ordered(g, WriteOptions{false});
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (written[a].text != written[b].text) return written[a].text < written[b].text;
    if (!tie_keys.empty()) return tie_keys[a] < tie_keys[b];
    return false;
  });

  out.gate_index.resize(n);
  out.fragment_position.assign(n, 0);
  int gate = 0;
  for (std::size_t pos = 0; pos < n; ++pos) {
    const int f = order[pos];
    out.fragment_position[f] = static_cast<int>(pos);
    out.gate_index[f].assign(fragments[f].size(), -1);
    for (int v : written[f].atom_order) {
      if (fragments[f].atom(v).is_wildcard()) out.gate_index[f][v] = gate++;
    }
    if (pos) out.text += '.';
    out.text += written[f].text;
  }
  return out;
}

}  // namespace

CanonicalLeavingGroup canonicalize_leaving_group_detailed(const std::vector<MolGraph>& fragments) {
  return canonicalize_impl(fragments, {});
}

std::string canonicalize_leaving_group(const std::vector<MolGraph>& fragments) {
  return canonicalize_impl(fragments, {}).text;
}

std::vector<MolGraph> contributing_reactants(const ReactionRecord& record) {
  std::set<int> product_maps;
  for (const auto& a : record.product.atoms()) product_maps.insert(a.atom_map);
  std::vector<MolGraph> out;
  for (const auto& r : record.reactants) {
    const bool contributes = std::any_of(r.atoms().begin(), r.atoms().end(), [&](const AtomRecord& a) {
      return a.atom_map > 0 && product_maps.count(a.atom_map);
    });
    if (contributes) out.push_back(r);
  }
  return out;
}

RetroLabels extract_labels(const ReactionRecord& record, int max_h_change) {
  const MolGraph& product = record.product;
  const int np = product.size();
  std::unordered_map<int, int> product_index;
  for (int v = 0; v < np; ++v) {
    const int m = product.atom(v).atom_map;
    if (m <= 0) throw MappingError("product atom " + std::to_string(v) + " has no map number");
    if (!product_index.emplace(m, v).second) throw LabelError("duplicate product map " + std::to_string(m));
  }

  // Locate each product atom among the reactants.
  std::vector<AtomRef> where(static_cast<std::size_t>(np));
  for (int j = 0; j < static_cast<int>(record.reactants.size()); ++j) {
    const auto& r = record.reactants[static_cast<std::size_t>(j)];
    for (int a = 0; a < r.size(); ++a) {
      const int m = r.atom(a).atom_map;
      const auto it = product_index.find(m);
      if (m <= 0 || it == product_index.end()) continue;
      auto& ref = where[static_cast<std::size_t>(it->second)];
      if (ref.reactant >= 0) throw LabelError("map " + std::to_string(m) + " appears in two reactant atoms");
      ref = {j, a};
    }
  }
  for (int v = 0; v < np; ++v) {
    const auto& ref = where[static_cast<std::size_t>(v)];
    if (ref.reactant < 0) {
      throw MappingError("product map " + std::to_string(product.atom(v).atom_map) +
                         " missing from reactants");
    }
    const auto& ra = record.reactants[static_cast<std::size_t>(ref.reactant)].atom(ref.atom);
    const auto& pa = product.atom(v);
    if (ra.atomic_number != pa.atomic_number) {
      throw MappingError("element changes across map " + std::to_string(pa.atom_map));
    }
    if (ra.formal_charge != pa.formal_charge) {
      throw LabelError("formal charge changes at map " + std::to_string(pa.atom_map));
    }
  }
  auto product_of = [&](int j, int a) -> int {
    const int m = record.reactants[static_cast<std::size_t>(j)].atom(a).atom_map;
    if (m <= 0) return -1;
    const auto it = product_index.find(m);
    if (it == product_index.end()) return -1;
    const auto& ref = where[static_cast<std::size_t>(it->second)];
    return (ref.reactant == j && ref.atom == a) ? it->second : -1;
  };

  RetroLabels labels;

  // Reaction center: product bonds that are missing or re-ordered on the reactant side.
  for (const auto& b : product.bonds()) {
    const auto& ru = where[static_cast<std::size_t>(b.u)];
    const auto& rv = where[static_cast<std::size_t>(b.v)];
    double reactant_order = 0.0;
    if (ru.reactant == rv.reactant) {
      reactant_order = record.reactants[static_cast<std::size_t>(ru.reactant)].bond_order(ru.atom, rv.atom);
    }
    if (reactant_order == b.order) continue;
    BondEdit e;
    e.u = b.u;
    e.v = b.v;
    e.map_u = product.atom(b.u).atom_map;
    e.map_v = product.atom(b.v).atom_map;
    if (e.map_u > e.map_v) {
      std::swap(e.u, e.v);
      std::swap(e.map_u, e.map_v);
    }
    e.kind = reactant_order == 0.0 ? BondEditKind::Delete : BondEditKind::OrderChange;
    e.reactant_order = reactant_order;
    labels.rc_bonds.push_back(e);
  }
  std::sort(labels.rc_bonds.begin(), labels.rc_bonds.end(), [](const BondEdit& a, const BondEdit& b) {
    return std::pair(a.map_u, a.map_v) < std::pair(b.map_u, b.map_v);
  });
  // Bonds between product atoms that exist only on the reactant side would
  // have to be formed by the retro edit; the edit space does not include that.
  for (int j = 0; j < static_cast<int>(record.reactants.size()); ++j) {
    for (const auto& b : record.reactants[static_cast<std::size_t>(j)].bonds()) {
      const int pu = product_of(j, b.u);
      const int pv = product_of(j, b.v);
      if (pu >= 0 && pv >= 0 && product.bond_order(pu, pv) == 0.0) {
        throw LabelError("bond between maps " + std::to_string(product.atom(pu).atom_map) + " and " +
                         std::to_string(product.atom(pv).atom_map) + " is broken in the forward direction");
      }
    }
  }

  labels.h_delta.assign(static_cast<std::size_t>(np), 0);
  for (int v = 0; v < np; ++v) {
    const auto& ref = where[static_cast<std::size_t>(v)];
    const int rh = record.reactants[static_cast<std::size_t>(ref.reactant)].atom(ref.atom).total_h();
    const int d = rh - product.atom(v).total_h();
    if (std::abs(d) > max_h_change) {
      throw LabelError("hydrogen change " + std::to_string(d) + " at map " +
                       std::to_string(product.atom(v).atom_map) + " exceeds the limit");
    }
    labels.h_delta[static_cast<std::size_t>(v)] = d;
  }

  // Leaving-group fragments: unmapped components of contributing reactants.
  struct PendingGate {
    int fragment;
    int wildcard;
    int product_atom;
    double order;
  };
  std::vector<MolGraph> fragments;
  std::vector<PendingGate> pending;
  std::vector<int> tie_keys;
  for (int j = 0; j < static_cast<int>(record.reactants.size()); ++j) {
    const auto& r = record.reactants[static_cast<std::size_t>(j)];
    std::vector<int> mapped(static_cast<std::size_t>(r.size()), -1);
    bool contributes = false;
    for (int a = 0; a < r.size(); ++a) {
      mapped[static_cast<std::size_t>(a)] = product_of(j, a);
      contributes = contributes || mapped[static_cast<std::size_t>(a)] >= 0;
    }
    if (!contributes) continue;  // reagent

    std::vector<int> comp(static_cast<std::size_t>(r.size()), -1);
    for (int s = 0; s < r.size(); ++s) {
      if (mapped[static_cast<std::size_t>(s)] >= 0 || comp[static_cast<std::size_t>(s)] >= 0) continue;
      std::vector<int> members{s};
      comp[static_cast<std::size_t>(s)] = s;
      for (std::size_t i = 0; i < members.size(); ++i) {
        for (int w : r.neighbors(members[i])) {
          if (mapped[static_cast<std::size_t>(w)] >= 0 || comp[static_cast<std::size_t>(w)] >= 0) continue;
          comp[static_cast<std::size_t>(w)] = s;
          members.push_back(w);
        }
      }
      std::sort(members.begin(), members.end());
      std::vector<int> local(static_cast<std::size_t>(r.size()), -1);
      std::vector<AtomRecord> atoms;
      std::vector<Bond> bonds;
      for (int a : members) {
        local[static_cast<std::size_t>(a)] = static_cast<int>(atoms.size());
        atoms.push_back(fragment_atom(r.atom(a)));
      }
      const int fragment_id = static_cast<int>(fragments.size());
      int tie = 1 << 30;
      for (const auto& b : r.bonds()) {
        const int lu = local[static_cast<std::size_t>(b.u)];
        const int lv = local[static_cast<std::size_t>(b.v)];
        if (lu >= 0 && lv >= 0) {
          bonds.push_back({lu, lv, b.order});
          continue;
        }
        const int inner = lu >= 0 ? lu : lv;
        const int outer = lu >= 0 ? b.v : b.u;
        if (inner < 0) continue;
        const int p = mapped[static_cast<std::size_t>(outer)];
        if (p < 0) continue;
        AtomRecord star;
        star.atomic_number = 0;
        const int wildcard = static_cast<int>(atoms.size());
        atoms.push_back(star);
        bonds.push_back({inner, wildcard, b.order});
        pending.push_back({fragment_id, wildcard, p, b.order});
        tie = std::min(tie, product.atom(p).atom_map);
      }
      if (tie == (1 << 30)) continue;  // detached by-product: no gate, nothing to attach
      fragments.emplace_back(std::move(atoms), std::move(bonds));
      tie_keys.push_back(tie);
    }
  }
  if (static_cast<int>(fragments.size()) > kMaxLeavingGroupFragments) {
    throw LabelError("more than " + std::to_string(kMaxLeavingGroupFragments) + " leaving-group fragments");
  }
  if (!fragments.empty()) {
    const auto canon = canonicalize_impl(fragments, tie_keys);
    labels.leaving_group = canon.text;
    for (const auto& pg : pending) {
      GateConnection gc;
      gc.product_atom = pg.product_atom;
      gc.product_map = product.atom(pg.product_atom).atom_map;
      gc.fragment = canon.fragment_position[static_cast<std::size_t>(pg.fragment)];
      gc.gate = canon.gate_index[static_cast<std::size_t>(pg.fragment)][static_cast<std::size_t>(pg.wildcard)];
      gc.order = pg.order;
      labels.gate_connections.push_back(gc);
    }
    std::sort(labels.gate_connections.begin(), labels.gate_connections.end(),
              [](const GateConnection& a, const GateConnection& b) { return a.gate < b.gate; });
  }
  return labels;
}

LeavingGroupVocab::LeavingGroupVocab() { add_entry("", 0); }

void LeavingGroupVocab::add_entry(std::string canonical, std::size_t frequency) {
  if (index_.count(canonical)) throw FormatError("duplicate leaving group '" + canonical + "'");
  LeavingGroupEntry e;
  e.canonical = canonical;
  e.frequency = frequency;
  if (!canonical.empty()) {
    e.graph = parse_smiles(canonical);
    for (int v = 0; v < e.graph.size(); ++v) {
      if (!e.graph.atom(v).is_wildcard()) continue;
      if (e.graph.heavy_degree(v) != 1) throw GateError("gate atom must have exactly one neighbor");
      e.gate_atoms.push_back(v);
      e.gate_orders.push_back(e.graph.bond_order(v, e.graph.neighbors(v).front()));
    }
    if (e.gate_atoms.empty()) throw GateError("leaving group '" + canonical + "' has no gate atom");
  }
  index_.emplace(canonical, static_cast<int>(entries_.size()));
  entries_.push_back(std::move(e));
}

LeavingGroupVocab LeavingGroupVocab::build(const std::vector<ReactionRecord>& corpus, int max_h_change,
                                           VocabStats* stats) {
  VocabStats local;
  VocabStats& st = stats ? *stats : local;
  st = VocabStats{};
  st.records = corpus.size();
  std::map<std::string, std::size_t> freq;
  std::size_t empty = 0;
  for (const auto& r : corpus) {
    try {
      const auto labels = extract_labels(r, max_h_change);
      ++st.labelled;
      if (labels.leaving_group.empty()) {
        ++empty;
      } else {
        ++freq[labels.leaving_group];
      }
    } catch (const Error&) {
      ++st.skipped;
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ordered(freq.begin(), freq.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  LeavingGroupVocab vocab;
  vocab.entries_.front().frequency = empty;
  for (auto& [text, count] : ordered) vocab.add_entry(text, count);
  st.lg_per_reaction = st.labelled ? static_cast<double>(ordered.size()) / static_cast<double>(st.labelled) : 0.0;
  return vocab;
}

std::string LeavingGroupVocab::to_text() const {
  std::ostringstream out;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    out << i << '\t' << entries_[i].frequency << '\t' << entries_[i].canonical << '\n';
  }
  return out.str();
}

LeavingGroupVocab LeavingGroupVocab::from_text(std::string_view text) {
  LeavingGroupVocab vocab;
  std::istringstream in{std::string(text)};
  std::string line;
  int expected = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw FormatError("vocabulary line " + std::to_string(expected) + " malformed");
    int index = 0;
    std::size_t frequency = 0;
    try {
      index = std::stoi(line.substr(0, t1));
      frequency = std::stoull(line.substr(t1 + 1, t2 - t1 - 1));
    } catch (const std::exception&) {
      throw FormatError("vocabulary line " + std::to_string(expected) + " malformed");
    }
    if (index != expected) throw FormatError("vocabulary indices must be consecutive from 0");
    const std::string canonical = line.substr(t2 + 1);
    if (index == 0) {
      if (!canonical.empty()) throw FormatError("vocabulary entry 0 must be the empty leaving group");
      vocab.entries_.front().frequency = frequency;
    } else {
      vocab.add_entry(canonical, frequency);
    }
    ++expected;
  }
  return vocab;
}

LeavingGroupVocab LeavingGroupVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open vocabulary " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

void LeavingGroupVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write vocabulary " + path.string());
  out << to_text();
}

std::optional<int> LeavingGroupVocab::find(const std::string& canonical) const {
  const auto it = index_.find(canonical);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool LeavingGroupVocab::assign_ids(RetroLabels& labels) const {
  labels.lg_ids.clear();
  if (labels.leaving_group.empty()) return true;
  const auto id = find(labels.leaving_group);
  if (!id) return false;
  labels.lg_ids.push_back(*id);
  return true;
}

int LeavingGroupVocab::max_gates() const {
  int m = 0;
  for (const auto& e : entries_) m = std::max(m, e.gate_count());
  return m;
}

}  // namespace retrograph
