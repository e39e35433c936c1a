#include "neas/netcore.hpp"

namespace neas {

template class Tensor<float>;
template class Tensor<double>;

}  // namespace neas
