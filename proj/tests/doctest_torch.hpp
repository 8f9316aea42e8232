#pragma once

// libtorch's logging header defines a CHECK macro of its own; the test suites use doctest's.
#ifdef CHECK
#undef CHECK
#endif
#include <doctest.h>
