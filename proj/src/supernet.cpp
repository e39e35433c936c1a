#include "neas/supernet.hpp"

#include <fstream>

#include "neas/checkpoint.hpp"

namespace neas {

template class Supernet<float>;
template class Supernet<double>;

void save_supernet(const Supernet<double>& net, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write checkpoint " + tmp);
    const auto blocks = net.all_blocks();
    write_checkpoint<double>(os, blocks);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw Error("cannot move checkpoint into place at " + path);
  }
}

void load_supernet(Supernet<double>& net, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint " + path);
  const auto blocks = net.all_blocks();
  read_checkpoint<double>(is, blocks);
}

}  // namespace neas
