#pragma once

#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mlcaps/errors.hpp"

namespace mlcaps {

inline constexpr std::size_t kNoParent = std::numeric_limits<std::size_t>::max();

struct LabelLevel {
  std::string name;
  std::size_t classes = 0;
  std::vector<std::string> class_names;  // optional; empty or one per class
};

// Class-label tree, levels ordered coarse -> fine.
// parent_of[n][k] is the level n-1 parent of class k at level n; parent_of[0] is empty.
struct LabelTree {
  std::vector<LabelLevel> levels;
  std::vector<std::vector<std::size_t>> parent_of;

  std::size_t depth() const { return levels.size(); }
  std::size_t classes(std::size_t level) const { return levels.at(level).classes; }
  std::size_t fine_classes() const { return levels.back().classes; }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> out;
    for (const auto& l : levels) out.push_back(l.classes);
    return out;
  }

  const std::string& class_name(std::size_t level, std::size_t id) const {
    static const std::string empty;
    const auto& names = levels.at(level).class_names;
    return id < names.size() ? names[id] : empty;
  }
};

// One class id per level, coarse -> fine.
struct MultiLabel {
  std::vector<std::size_t> ids;

  std::size_t fine() const { return ids.back(); }
  bool operator==(const MultiLabel&) const = default;
};

// Structural problems of a tree, empty when the tree is usable.
inline std::vector<std::string> validate(const LabelTree& tree) {
  std::vector<std::string> issues;
  if (tree.depth() < 2) issues.push_back("tree needs at least 2 levels");
  if (tree.parent_of.size() != tree.depth()) {
    issues.push_back("parent map has " + std::to_string(tree.parent_of.size()) +
                     " entries for " + std::to_string(tree.depth()) + " levels");
    return issues;
  }
  for (std::size_t n = 0; n < tree.depth(); ++n) {
    const auto& level = tree.levels[n];
    if (level.classes == 0) issues.push_back("level '" + level.name + "' has no classes");
    if (!level.class_names.empty() && level.class_names.size() != level.classes)
      issues.push_back("level '" + level.name + "' names " +
                       std::to_string(level.class_names.size()) + " of " +
                       std::to_string(level.classes) + " classes");
  }
  if (!tree.parent_of[0].empty()) issues.push_back("coarsest level cannot have parents");
  for (std::size_t n = 1; n < tree.depth(); ++n) {
    const auto& parents = tree.parent_of[n];
    const auto& level = tree.levels[n];
    const std::size_t upper = tree.levels[n - 1].classes;
    std::vector<std::size_t> children(upper, 0);
    if (parents.size() != level.classes)
      issues.push_back("level '" + level.name + "' has parent entries for " +
                       std::to_string(parents.size()) + " of " + std::to_string(level.classes) +
                       " classes");
    for (std::size_t k = 0; k < parents.size(); ++k) {
      if (parents[k] == kNoParent) {
        issues.push_back("orphan class " + std::to_string(k) + " at level '" + level.name + "'");
      } else if (parents[k] >= upper) {
        issues.push_back("class " + std::to_string(k) + " at level '" + level.name +
                         "' points to parent " + std::to_string(parents[k]) +
                         " outside level '" + tree.levels[n - 1].name + "' (" +
                         std::to_string(upper) + " classes)");
      } else {
        ++children[parents[k]];
      }
    }
    for (std::size_t p = 0; p < upper; ++p)
      if (children[p] == 0)
        issues.push_back("class " + std::to_string(p) + " at level '" +
                         tree.levels[n - 1].name + "' has no children");
  }
  return issues;
}

inline MultiLabel expand(const LabelTree& tree, std::size_t fine_label) {
  if (fine_label >= tree.fine_classes())
    throw std::out_of_range("expand: fine label " + std::to_string(fine_label) +
                            " out of range (" + std::to_string(tree.fine_classes()) +
                            " classes)");
  MultiLabel out;
  out.ids.assign(tree.depth(), 0);
  out.ids.back() = fine_label;
  for (std::size_t n = tree.depth() - 1; n > 0; --n) out.ids[n - 1] = tree.parent_of[n].at(out.ids[n]);
  return out;
}

inline bool is_consistent(const LabelTree& tree, const MultiLabel& label) {
  if (label.ids.size() != tree.depth()) return false;
  for (std::size_t n = 0; n < tree.depth(); ++n)
    if (label.ids[n] >= tree.classes(n)) return false;
  for (std::size_t n = 1; n < tree.depth(); ++n)
    if (tree.parent_of[n][label.ids[n]] != label.ids[n - 1]) return false;
  return true;
}

// Fraction of per-level predictions that form an ancestor-consistent chain.
inline double consistency_rate(const LabelTree& tree, const std::vector<MultiLabel>& predictions) {
  if (predictions.empty()) throw std::invalid_argument("consistency_rate: no predictions");
  std::size_t ok = 0;
  for (const auto& p : predictions) ok += is_consistent(tree, p) ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(predictions.size());
}

// Hierarchy text format, version 1:
//
//   mlcaps-hierarchy 1
//   levels coarse:2 medium:7 fine:10
//   class 0:transport 0:sky 0:airplane
//   ...
//
// One `class` record per fine class giving its chain coarse -> fine as id:name.
// '#' starts a comment.
inline LabelTree parse_hierarchy(std::istream& in) {
  LabelTree tree;
  std::string line;
  std::size_t lineno = 0;
  bool have_magic = false;
  std::vector<std::map<std::size_t, std::string>> names;
  std::vector<bool> fine_seen;
  auto fail = [&](const std::string& what) {
    throw format_error("hierarchy line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string keyword;
    if (!(ls >> keyword)) continue;
    if (!have_magic) {
      int version = 0;
      if (keyword != "mlcaps-hierarchy" || !(ls >> version)) fail("missing 'mlcaps-hierarchy <version>' header");
      if (version != 1) fail("unsupported version " + std::to_string(version));
      have_magic = true;
    } else if (keyword == "levels") {
      if (!tree.levels.empty()) fail("duplicate 'levels' header");
      std::string tok;
      while (ls >> tok) {
        auto colon = tok.find(':');
        if (colon == std::string::npos) fail("level '" + tok + "' must be name:count");
        LabelLevel level;
        level.name = tok.substr(0, colon);
        try {
          level.classes = std::stoul(tok.substr(colon + 1));
        } catch (const std::exception&) {
          fail("bad class count in '" + tok + "'");
        }
        tree.levels.push_back(level);
      }
      if (tree.levels.size() < 2) fail("need at least 2 levels");
      tree.parent_of.assign(tree.levels.size(), {});
      for (std::size_t n = 1; n < tree.levels.size(); ++n)
        tree.parent_of[n].assign(tree.levels[n].classes, kNoParent);
      names.assign(tree.levels.size(), {});
      fine_seen.assign(tree.levels.back().classes, false);
    } else if (keyword == "class") {
      if (tree.levels.empty()) fail("'class' record before 'levels' header");
      std::vector<std::size_t> chain;
      std::string tok;
      while (ls >> tok) {
        auto colon = tok.find(':');
        if (colon == std::string::npos || colon + 1 == tok.size()) fail("entry '" + tok + "' must be id:name");
        const std::size_t n = chain.size();
        if (n >= tree.levels.size()) fail("chain longer than the number of levels");
        std::size_t id = 0;
        try {
          id = std::stoul(tok.substr(0, colon));
        } catch (const std::exception&) {
          fail("bad class id in '" + tok + "'");
        }
        if (id >= tree.levels[n].classes)
          fail("class id " + std::to_string(id) + " out of range for level '" +
               tree.levels[n].name + "'");
        std::string name = tok.substr(colon + 1);
        auto [it, inserted] = names[n].emplace(id, name);
        if (!inserted && it->second != name)
          fail("class " + std::to_string(id) + " at level '" + tree.levels[n].name +
               "' named both '" + it->second + "' and '" + name + "'");
        if (n > 0) {
          auto& slot = tree.parent_of[n][id];
          if (slot != kNoParent && slot != chain.back())
            fail("class " + std::to_string(id) + " at level '" + tree.levels[n].name +
                 "' has two parents");
          slot = chain.back();
        }
        chain.push_back(id);
      }
      if (chain.size() != tree.levels.size()) fail("chain must list one class per level");
      if (fine_seen[chain.back()]) fail("fine class " + std::to_string(chain.back()) + " listed twice");
      fine_seen[chain.back()] = true;
    } else {
      fail("unknown record '" + keyword + "'");
    }
  }
  if (!have_magic) throw format_error("hierarchy: empty file");
  if (tree.levels.empty()) throw format_error("hierarchy: missing 'levels' header");
  for (std::size_t k = 0; k < fine_seen.size(); ++k)
    if (!fine_seen[k]) throw format_error("hierarchy: fine class " + std::to_string(k) + " has no record");
  for (std::size_t n = 0; n < tree.levels.size(); ++n) {
    auto& level = tree.levels[n];
    if (names[n].size() == level.classes) {
      for (const auto& [id, name] : names[n]) level.class_names.push_back(name);
    }
  }
  if (auto issues = validate(tree); !issues.empty()) {
    std::string msg = "hierarchy: invalid tree:";
    for (const auto& i : issues) msg += "\n  " + i;
    throw format_error(msg);
  }
  return tree;
}

inline LabelTree load_hierarchy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw format_error("hierarchy: cannot open " + path);
  return parse_hierarchy(in);
}

inline void write_hierarchy(std::ostream& out, const LabelTree& tree) {
  out << "mlcaps-hierarchy 1\nlevels";
  for (const auto& l : tree.levels) out << ' ' << l.name << ':' << l.classes;
  out << '\n';
  for (std::size_t k = 0; k < tree.fine_classes(); ++k) {
    auto chain = expand(tree, k);
    out << "class";
    for (std::size_t n = 0; n < tree.depth(); ++n) {
      const auto& name = tree.class_name(n, chain.ids[n]);
      out << ' ' << chain.ids[n] << ':'
          << (name.empty() ? tree.levels[n].name + std::to_string(chain.ids[n]) : name);
    }
    out << '\n';
  }
}

inline std::string to_string(const LabelTree& tree) {
  std::ostringstream os;
  write_hierarchy(os, tree);
  return os.str();
}

}  // namespace mlcaps
