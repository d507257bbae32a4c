"""Core numerical modules"""
