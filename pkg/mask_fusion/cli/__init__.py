"""Command-line pipeline"""
