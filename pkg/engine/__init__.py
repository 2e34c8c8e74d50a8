from .network import Network, build_network, forward, predict, backward, capture_bounds
from .games import explain, line_search_lambda, optimize_mask, render
from .modelfile import load_model, save_model
