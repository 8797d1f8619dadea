#include "ssmavs/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "ssmavs/tensor_io.hpp"

namespace ssmavs {

void save_checkpoint(const ParamStore& ps, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::string manifest;
  ps.for_each([&](const Parameter& p) {
    const std::string file = p.name + ".nst";
    save_tensor(p.value, dir + "/" + file);
    manifest += p.name + "\t" + file + "\n";
  });
  std::ofstream f(dir + "/manifest.txt", std::ios::binary | std::ios::trunc);
  check(f.good(), "save_checkpoint: cannot write manifest in " + dir);
  f.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  check(f.good(), "save_checkpoint: manifest write failed in " + dir);
}

void load_checkpoint(ParamStore& ps, const std::string& dir) {
  std::ifstream f(dir + "/manifest.txt");
  check(f.good(), "load_checkpoint: cannot open " + dir + "/manifest.txt");
  std::set<std::string> seen;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    check(tab != std::string::npos,
          "load_checkpoint: malformed manifest line: " + line);
    const std::string name = line.substr(0, tab);
    const std::string rel = line.substr(tab + 1);
    check(ps.contains(name),
          "load_checkpoint: manifest names unknown parameter " + name);
    Parameter& p = ps.at(name);
    Tensor t = load_tensor(dir + "/" + rel);
    check(t.shape() == p.value.shape(),
          "load_checkpoint: " + name + " has shape " + shape_str(t.shape()) +
              ", expected " + shape_str(p.value.shape()));
    check(t.dtype() == p.value.dtype(),
          "load_checkpoint: " + name + " dtype mismatch");
    p.value = std::move(t);
    seen.insert(name);
  }
  i64 missing = 0;
  std::string first_missing;
  ps.for_each([&](const Parameter& p) {
    if (seen.find(p.name) == seen.end()) {
      if (missing == 0) first_missing = p.name;
      ++missing;
    }
  });
  check(missing == 0, "load_checkpoint: manifest is missing " +
                          std::to_string(missing) + " parameters (first: " +
                          first_missing + ")");
}

}  // namespace ssmavs
