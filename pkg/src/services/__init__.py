"""Services package for the VLCD desk engine."""
