"""Recurrent kernel machine cells, from RKM-LSTM down to the CNN."""
