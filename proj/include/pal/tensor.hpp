#pragma once

#include "pal/tensor/gradcheck.hpp"
#include "pal/tensor/ops.hpp"
#include "pal/tensor/random.hpp"
#include "pal/tensor/tape.hpp"
#include "pal/tensor/tensor.hpp"
