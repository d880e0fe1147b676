#pragma once

#ifndef HICI_VERSION
#define HICI_VERSION "0.1.0"
#endif

namespace hici {
inline constexpr const char* kVersion = HICI_VERSION;
}
