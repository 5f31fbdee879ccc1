#include "compatfam/tensor.hpp"

#include <sstream>

namespace compatfam {

Tensor Tensor::row_copy(std::int64_t r) const {
    Tensor out({1, cols()});
    for (std::int64_t c = 0; c < cols(); ++c) out[c] = at(r, c);
    return out;
}

std::string shape_str(const std::vector<std::int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

}  // namespace compatfam
