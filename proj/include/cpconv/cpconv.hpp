#pragma once

#include "cpconv/bench.hpp"
#include "cpconv/cp_decomposition.hpp"
#include "cpconv/cpt_io.hpp"
#include "cpconv/dataset.hpp"
#include "cpconv/layers.hpp"
#include "cpconv/model_io.hpp"
#include "cpconv/network.hpp"
#include "cpconv/rewrite.hpp"
#include "cpconv/tensor.hpp"
