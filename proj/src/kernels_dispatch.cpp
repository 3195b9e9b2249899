// Runtime kernel selection.  Best available variant wins unless MOS_KERNELS
// or kernels::force() pins one explicitly.

#include <cstdlib>
#include <stdexcept>

#include "mos/kernels.hpp"

namespace mos::kernels {
namespace {

Table g_active;
bool g_initialized = false;

Table table_for(const std::string& name) {
  if (name == "scalar") return detail::scalar_table();
  if (name == "avx2") {
    if (!detail::avx2_supported())
      throw std::invalid_argument("kernels: variant 'avx2' not supported by this build/CPU");
    return detail::avx2_table();
  }
  if (name == "avx512") {
    if (!detail::avx512_supported())
      throw std::invalid_argument("kernels: variant 'avx512' not supported by this build/CPU");
    return detail::avx512_table();
  }
  throw std::invalid_argument("kernels: unknown variant '" + name +
                              "' (expected scalar, avx2, or avx512)");
}

void initialize() {
  const char* env = std::getenv("MOS_KERNELS");
  if (env != nullptr && env[0] != '\0') {
    g_active = table_for(env);
  } else if (detail::avx512_supported()) {
    g_active = detail::avx512_table();
  } else if (detail::avx2_supported()) {
    g_active = detail::avx2_table();
  } else {
    g_active = detail::scalar_table();
  }
  g_initialized = true;
}

}  // namespace

const Table& active() {
  if (!g_initialized) initialize();
  return g_active;
}

void force(const std::string& name) {
  g_active = table_for(name);
  g_initialized = true;
}

std::vector<std::string> available() {
  std::vector<std::string> out{"scalar"};
  if (detail::avx2_supported()) out.push_back("avx2");
  if (detail::avx512_supported()) out.push_back("avx512");
  return out;
}

}  // namespace mos::kernels
