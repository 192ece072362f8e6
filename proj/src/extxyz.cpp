#include "tnet/data.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tnet {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

bool to_double(std::string_view s, double& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

bool to_long(std::string_view s, long& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class LineReader {
 public:
  explicit LineReader(std::string_view text) : text_(text) {}
  bool next(std::string_view& line) {
    if (pos_ >= text_.size()) return false;
    const std::size_t end = text_.find('\n', pos_);
    const std::size_t stop = end == std::string_view::npos ? text_.size() : end;
    line = text_.substr(pos_, stop - pos_);
    pos_ = stop + 1;
    return true;
  }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
};

struct Columns {
  bool forces = false;
  bool charges = false;
};

// Reads "Properties=species:S:1:pos:R:3:forces:R:3:charges:R:1".
Columns parse_properties(std::string_view spec, std::size_t frame) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : spec) {
    if (ch == ':') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  if (fields.size() % 3 != 0) throw DataError("frame " + std::to_string(frame) + ": malformed Properties");
  Columns cols;
  for (std::size_t i = 0; i < fields.size(); i += 3) {
    const std::string& name = fields[i];
    if (name == "species" || name == "pos") continue;
    if (name == "forces") cols.forces = true;
    else if (name == "charges") cols.charges = true;
    else throw DataError("frame " + std::to_string(frame) + ": unsupported property '" + name + "'");
  }
  return cols;
}

}  // namespace

std::vector<AtomicSystem> parse_extxyz(std::string_view text) {
  std::vector<AtomicSystem> frames;
  LineReader reader(text);
  std::string_view line;
  while (reader.next(line)) {
    const auto head = split_ws(line);
    if (head.empty()) continue;
    const std::size_t frame = frames.size();
    const std::string where = "frame " + std::to_string(frame);
    long count = 0;
    if (head.size() != 1 || !to_long(head[0], count) || count < 1)
      throw DataError(where + ": expected atom count, got '" + std::string(line) + "'");

    std::string_view comment;
    if (!reader.next(comment)) throw DataError(where + ": missing comment line");

    AtomicSystem sys;
    Columns cols;
    bool have_properties = false;
    for (std::string_view tok : split_ws(comment)) {
      const std::size_t eq = tok.find('=');
      if (eq == std::string_view::npos) throw DataError(where + ": bad property token '" + std::string(tok) + "'");
      const std::string_view key = tok.substr(0, eq), val = tok.substr(eq + 1);
      double v = 0.0;
      if (key == "Properties") {
        cols = parse_properties(val, frame);
        have_properties = true;
      } else if (key == "energy") {
        if (!to_double(val, v)) throw DataError(where + ": bad energy");
        sys.energy = v;
      } else if (key == "total_charge") {
        if (!to_double(val, v)) throw DataError(where + ": bad total_charge");
        sys.total_charge = v;
      } else if (key == "spin") {
        long s = 0;
        if (!to_long(val, s)) throw DataError(where + ": bad spin");
        sys.spin = static_cast<int>(s);
      } else {
        throw DataError(where + ": unknown key '" + std::string(key) + "'");
      }
    }

    sys.numbers.resize(static_cast<std::size_t>(count));
    sys.positions.resize(count, 3);
    Positions forces(count, 3);
    std::vector<double> charges(static_cast<std::size_t>(count));
    std::size_t expected_cols = 0;
    for (long a = 0; a < count; ++a) {
      std::string_view atom;
      const bool got = reader.next(atom);
      const auto tok = got ? split_ws(atom) : std::vector<std::string_view>{};
      if (!got || tok.size() < 4 || tok[0].empty() || !std::isalpha(static_cast<unsigned char>(tok[0][0])))
        throw DataError(where + ": header declares " + std::to_string(count) +
                        " atoms but the number of atom lines did not match (found " + std::to_string(a) + ")");
      if (!have_properties && a == 0) {
        if (tok.size() == 5) cols.charges = true;
        else if (tok.size() == 7) cols.forces = true;
        else if (tok.size() == 8) cols.forces = cols.charges = true;
      }
      expected_cols = 4 + (cols.forces ? 3 : 0) + (cols.charges ? 1 : 0);
      if (tok.size() != expected_cols)
        throw DataError(where + ", atom " + std::to_string(a) + ": expected " + std::to_string(expected_cols) +
                        " columns, got " + std::to_string(tok.size()));
      sys.numbers[static_cast<std::size_t>(a)] = atomic_number(tok[0]);
      std::size_t c = 1;
      for (int k = 0; k < 3; ++k, ++c)
        if (!to_double(tok[c], sys.positions(a, k))) throw DataError(where + ": bad coordinate");
      if (cols.forces)
        for (int k = 0; k < 3; ++k, ++c)
          if (!to_double(tok[c], forces(a, k))) throw DataError(where + ": bad force");
      if (cols.charges && !to_double(tok[c], charges[static_cast<std::size_t>(a)]))
        throw DataError(where + ": bad charge");
    }
    if (cols.forces) sys.forces = forces;
    if (cols.charges) sys.per_atom_charges = charges;
    try {
      validate(sys);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    frames.push_back(std::move(sys));
  }
  return frames;
}

std::vector<AtomicSystem> read_extxyz(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_extxyz(ss.str());
}

void write_extxyz(std::ostream& out, const std::vector<AtomicSystem>& systems) {
  for (const AtomicSystem& s : systems) {
    out << s.size() << '\n';
    if (s.energy) out << "energy=" << fmt17(*s.energy) << ' ';
    out << "total_charge=" << fmt17(s.total_charge) << " spin=" << s.spin << " Properties=species:S:1:pos:R:3";
    if (s.forces) out << ":forces:R:3";
    if (s.per_atom_charges) out << ":charges:R:1";
    out << '\n';
    for (std::size_t a = 0; a < s.size(); ++a) {
      const auto i = static_cast<Eigen::Index>(a);
      out << element_symbol(s.numbers[a]);
      for (int k = 0; k < 3; ++k) out << ' ' << fmt17(s.positions(i, k));
      if (s.forces)
        for (int k = 0; k < 3; ++k) out << ' ' << fmt17((*s.forces)(i, k));
      if (s.per_atom_charges) out << ' ' << fmt17((*s.per_atom_charges)[a]);
      out << '\n';
    }
  }
}

std::string write_extxyz(const std::vector<AtomicSystem>& systems) {
  std::ostringstream ss;
  write_extxyz(ss, systems);
  return ss.str();
}

void save_extxyz(const std::string& path, const std::vector<AtomicSystem>& systems) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  write_extxyz(out, systems);
}

}  // namespace tnet
