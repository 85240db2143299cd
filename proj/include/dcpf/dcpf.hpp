#pragma once

#include "dcpf/common.hpp"
#include "dcpf/dataset.hpp"
#include "dcpf/edm.hpp"
#include "dcpf/eval.hpp"
#include "dcpf/gamma_chain.hpp"
#include "dcpf/generator.hpp"
#include "dcpf/inference.hpp"
#include "dcpf/math.hpp"
