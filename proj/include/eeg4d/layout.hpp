#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace eeg4d {

class LayoutError : public std::runtime_error {
 public:
  LayoutError(const std::string& channel, const std::string& what)
      : std::runtime_error(channel.empty() ? what : "channel " + channel + ": " + what), channel_(channel) {}
  const std::string& channel() const { return channel_; }

 private:
  std::string channel_;
};

struct Placement {
  std::string channel;
  int row = 0;
  int col = 0;
};

// Channel-name -> grid cell map. Declaration order is the channel order
// expected by feature tensors.
struct ElectrodeLayout {
  int grid_h = 19;
  int grid_w = 19;
  std::vector<Placement> placements;

  std::size_t size() const { return placements.size(); }

  int index_of(const std::string& channel) const {
    for (std::size_t i = 0; i < placements.size(); ++i)
      if (placements[i].channel == channel) return static_cast<int>(i);
    return -1;
  }

  // Row-major [grid_h x grid_w], true where an electrode sits.
  std::vector<bool> occupied_mask() const {
    std::vector<bool> m(static_cast<std::size_t>(grid_h) * grid_w, false);
    for (const auto& p : placements) m[static_cast<std::size_t>(p.row) * grid_w + p.col] = true;
    return m;
  }

  // Channel name per cell, empty for padding.
  std::vector<std::string> cell_names() const {
    std::vector<std::string> m(static_cast<std::size_t>(grid_h) * grid_w);
    for (const auto& p : placements) m[static_cast<std::size_t>(p.row) * grid_w + p.col] = p.channel;
    return m;
  }
};

// SEED channel order.
inline const std::vector<std::string>& seed62_channels() {
  static const std::vector<std::string> names = {
      "FP1", "FPZ", "FP2", "AF3", "AF4", "F7",  "F5",  "F3",  "F1",  "FZ",  "F2",  "F4",  "F6",  "F8",  "FT7", "FC5",
      "FC3", "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8", "T7",  "C5",  "C3",  "C1",  "CZ",  "C2",  "C4",  "C6",  "T8",
      "TP7", "CP5", "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8", "P7",  "P5",  "P3",  "P1",  "PZ",  "P2",  "P4",
      "P6",  "P8",  "PO7", "PO5", "PO3", "POZ", "PO4", "PO6", "PO8", "CB1", "O1",  "OZ",  "O2",  "CB2"};
  return names;
}

// Throws LayoutError naming the first offending channel.
inline void validate_layout(const ElectrodeLayout& layout, const std::vector<std::string>& required) {
  if (layout.grid_h <= 0 || layout.grid_w <= 0) throw LayoutError("", "grid dimensions must be positive");
  std::set<std::string> names;
  std::map<std::pair<int, int>, std::string> cells;
  for (const auto& p : layout.placements) {
    if (!names.insert(p.channel).second) throw LayoutError(p.channel, "listed more than once");
    if (p.row < 0 || p.row >= layout.grid_h || p.col < 0 || p.col >= layout.grid_w)
      throw LayoutError(p.channel, "cell (" + std::to_string(p.row) + "," + std::to_string(p.col) + ") is outside the " +
                                       std::to_string(layout.grid_h) + "x" + std::to_string(layout.grid_w) + " grid");
    auto [it, fresh] = cells.emplace(std::pair{p.row, p.col}, p.channel);
    if (!fresh)
      throw LayoutError(p.channel, "duplicate cell (" + std::to_string(p.row) + "," + std::to_string(p.col) + ") already used by " +
                                       it->second);
  }
  for (const auto& r : required)
    if (!names.count(r)) throw LayoutError(r, "missing from layout");
}

// Parses `name row col` lines; '#' starts a comment.
inline ElectrodeLayout parse_layout(std::istream& is, const std::vector<std::string>& required = seed62_channels(),
                                    int grid_h = 19, int grid_w = 19) {
  ElectrodeLayout layout;
  layout.grid_h = grid_h;
  layout.grid_w = grid_w;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    Placement p;
    if (!(ls >> p.channel)) continue;
    std::string extra;
    if (!(ls >> p.row >> p.col) || (ls >> extra))
      throw LayoutError(p.channel, "line " + std::to_string(lineno) + " is not `name row col`");
    layout.placements.push_back(p);
  }
  validate_layout(layout, required);
  return layout;
}

inline ElectrodeLayout load_layout(const std::string& path, const std::vector<std::string>& required = seed62_channels()) {
  std::ifstream is(path);
  if (!is) throw LayoutError("", "cannot open layout file " + path);
  return parse_layout(is, required);
}

// Same table as layouts/seed62_19x19.txt (a test keeps the two in sync).
inline const char* seed62_layout_table() {
  return R"(FP1 1 7
FPZ 1 9
FP2 1 11
AF3 3 7
AF4 3 11
F7 5 1
F5 5 3
F3 5 5
F1 5 7
FZ 5 9
F2 5 11
F4 5 13
F6 5 15
F8 5 17
FT7 7 1
FC5 7 3
FC3 7 5
FC1 7 7
FCZ 7 9
FC2 7 11
FC4 7 13
FC6 7 15
FT8 7 17
T7 9 1
C5 9 3
C3 9 5
C1 9 7
CZ 9 9
C2 9 11
C4 9 13
C6 9 15
T8 9 17
TP7 11 1
CP5 11 3
CP3 11 5
CP1 11 7
CPZ 11 9
CP2 11 11
CP4 11 13
CP6 11 15
TP8 11 17
P7 13 1
P5 13 3
P3 13 5
P1 13 7
PZ 13 9
P2 13 11
P4 13 13
P6 13 15
P8 13 17
PO7 15 3
PO5 15 5
PO3 15 7
POZ 15 9
PO4 15 11
PO6 15 13
PO8 15 15
CB1 17 5
O1 17 7
OZ 17 9
O2 17 11
CB2 17 13
)";
}

inline const ElectrodeLayout& default_layout() {
  static const ElectrodeLayout layout = [] {
    std::istringstream is(seed62_layout_table());
    return parse_layout(is);
  }();
  return layout;
}

}  // namespace eeg4d
